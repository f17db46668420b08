//! Whisper/normal distance per representation layer, DTW alignment and
//! 2-D PCA projections.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::dsp::{mel_spectrogram_aligned, MelConfig};
use crate::error::{Error, Result};
use crate::stu::Stu;
use crate::whisperize::{whisperize, WhisperizeConfig};

/// Cosine distance `1 − cos(a, b)`. Two zero vectors are at distance 0; a
/// zero vector and a non-zero one at distance 1.
pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - a.dot(&b) / (na * nb)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    FrameSync,
    Dtw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtwPath {
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimum-cost monotone path from `(0, 0)` to `(T₁−1, T₂−1)` with steps
/// (1,1), (1,0), (0,1) and cosine frame cost. Ties prefer the diagonal.
pub fn dtw_align(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<DtwPath> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 {
        return Err(Error::Invalid("dtw needs non-empty sequences".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape("dtw", format!("widths {} and {}", a.ncols(), b.ncols())));
    }
    let cost = Array2::from_shape_fn((n, m), |(i, j)| cosine_distance(a.row(i), b.row(j)));
    let mut acc = Array2::from_elem((n, m), f64::INFINITY);
    for i in 0..n {
        for j in 0..m {
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[[i - 1, j - 1]] } else { f64::INFINITY };
                let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
                let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[[i, j]] = prev + cost[[i, j]];
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[[i - 1, j - 1]] } else { f64::INFINITY };
        let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
        let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwPath {
        path,
        cost: acc[[n - 1, m - 1]],
    })
}

/// Mean cosine distance between corresponding frames.
pub fn sequence_distance(a: ArrayView2<f64>, b: ArrayView2<f64>, alignment: Alignment) -> Result<f64> {
    match alignment {
        Alignment::FrameSync => {
            if a.ncols() != b.ncols() {
                return Err(Error::shape("distance", format!("widths {} and {}", a.ncols(), b.ncols())));
            }
            let t = a.nrows().min(b.nrows());
            if t == 0 {
                return Err(Error::Invalid("distance needs non-empty sequences".into()));
            }
            Ok((0..t).map(|i| cosine_distance(a.row(i), b.row(i))).sum::<f64>() / t as f64)
        }
        Alignment::Dtw => {
            let p = dtw_align(a, b)?;
            Ok(p.cost / p.path.len() as f64)
        }
    }
}

/// A normal utterance and a whispered rendition of it.
#[derive(Debug, Clone)]
pub struct Pair {
    pub normal: AudioClip,
    pub whisper: AudioClip,
    /// True when the whisper is frame-synchronous with the normal clip.
    pub aligned: bool,
}

/// Pairs each clip with its pseudo-whisper (seeded by index), which is
/// frame-synchronous by construction.
pub fn aligned_pairs(normals: &[AudioClip], base_seed: u64) -> Result<Vec<Pair>> {
    normals
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let w = whisperize(n, &WhisperizeConfig::with_seed(base_seed.wrapping_add(i as u64)))?;
            Ok(Pair {
                normal: n.clone(),
                whisper: w,
                aligned: true,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapDistance {
    /// `layer0` … `layerN`, then `final`.
    pub tap: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub taps: Vec<TapDistance>,
    pub mel: f64,
    pub pairs: usize,
    pub metric: String,
    pub alignment: Alignment,
}

impl DistanceReport {
    pub fn tap(&self, name: &str) -> Option<f64> {
        self.taps.iter().find(|t| t.tap == name).map(|t| t.distance)
    }

    /// Distance at the frontend projection (tap 0).
    pub fn first(&self) -> f64 {
        self.taps[0].distance
    }

    /// Distance at the post-projection units.
    pub fn final_tap(&self) -> f64 {
        self.taps.last().expect("final tap present").distance
    }

    /// `space,distance` rows: every tap, then `mel`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "space,distance")?;
        for t in &self.taps {
            writeln!(w, "{},{}", t.tap, t.distance)?;
        }
        writeln!(w, "mel,{}", self.mel)
    }
}

/// Mean cosine distance between normal and whispered renditions at every
/// encoder tap and in log-mel space, averaged over pairs.
pub fn layer_distance(stu: &Stu, pairs: &[Pair], alignment: Alignment) -> Result<DistanceReport> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no pairs to analyze".into()));
    }
    let mel_cfg = MelConfig::default();
    let n_taps = stu.config.n_layers + 2;
    let mut sums = vec![0.0; n_taps];
    let mut mel = 0.0;
    let mut names = Vec::new();
    for pair in pairs {
        if alignment == Alignment::FrameSync && !pair.aligned {
            return Err(Error::Invalid("frame-sync distance requested for an unaligned pair".into()));
        }
        let a = stu.encode_all_taps(&pair.normal)?;
        let b = stu.encode_all_taps(&pair.whisper)?;
        names = a.iter().map(|u| u.tap.to_string()).collect();
        for (s, (x, y)) in sums.iter_mut().zip(a.iter().zip(&b)) {
            *s += sequence_distance(x.vectors.view(), y.vectors.view(), alignment)?;
        }
        let ma = mel_spectrogram_aligned(&pair.normal.to_canonical_rate()?, &mel_cfg)?;
        let mb = mel_spectrogram_aligned(&pair.whisper.to_canonical_rate()?, &mel_cfg)?;
        mel += sequence_distance(ma.data.view(), mb.data.view(), alignment)?;
    }
    let n = pairs.len() as f64;
    Ok(DistanceReport {
        taps: names
            .into_iter()
            .zip(sums)
            .map(|(tap, s)| TapDistance { tap, distance: s / n })
            .collect(),
        mel: mel / n,
        pairs: pairs.len(),
        metric: "cosine".into(),
        alignment,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `N × 2` coordinates.
    pub points: Array2<f64>,
    /// Unit-norm principal axes as rows, `2 × d`.
    pub components: Array2<f64>,
    pub explained_variance: [f64; 2],
}

/// Projects rows onto the top two principal components of the centered
/// data, ordered by explained variance. Data with a single column gets a
/// zero second coordinate.
pub fn project_2d(vectors: ArrayView2<f64>) -> Result<Projection> {
    let (n, d) = vectors.dim();
    if n < 2 {
        return Err(Error::InsufficientData(format!("projection needs at least 2 points, got {n}")));
    }
    if d == 0 {
        return Err(Error::Invalid("projection needs at least one feature".into()));
    }
    let mean = vectors.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &vectors - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Array2::zeros((2, d));
    let mut explained = [0.0; 2];
    for (c, &idx) in order.iter().take(2).enumerate() {
        explained[c] = eig.eigenvalues[idx].max(0.0);
        let v = eig.eigenvectors.column(idx);
        // deterministic sign: largest-magnitude entry positive
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).expect("d >= 1");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[[c, j]] = sign * v[j];
        }
    }
    let points = centered.dot(&components.t());
    Ok(Projection {
        points,
        components,
        explained_variance: explained,
    })
}

/// `label,x,y` rows for a scatter plot.
pub fn write_points_csv<W: std::io::Write>(points: ArrayView2<f64>, labels: &[String], mut w: W) -> std::io::Result<()> {
    writeln!(w, "label,x,y")?;
    for (row, label) in points.outer_iter().zip(labels) {
        writeln!(w, "{label},{},{}", row[0], row[1])?;
    }
    Ok(())
}
