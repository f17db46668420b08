//! K-means unit discovery: codebooks that turn feature frames into
//! discrete pretraining targets.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a codebook's features came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Mfcc,
    Layer(usize),
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceTag::Mfcc => f.write_str("mfcc"),
            SourceTag::Layer(l) => write!(f, "layer({l})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 16,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Raw Lloyd result on already-normalized data.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    /// Distortion after every assignment step, starting with the seeding.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn distortion(&self) -> f64 {
        *self.history.last().expect("at least one assignment")
    }
}

/// K centroids in a per-dimension standardized feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitCodebook {
    pub centroids: Array2<f64>,
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub source_tag: SourceTag,
    pub fit_distortion: f64,
}

/// Discrete unit ids at 50 frames per second.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteUnitSeq {
    pub ids: Vec<usize>,
    pub k: usize,
}

impl DiscreteUnitSeq {
    pub const FRAME_RATE: f64 = 50.0;

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids`; ties go to the lowest index.
fn nearest(centroids: &ArrayView2<f64>, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(c.as_slice().expect("standard layout"), x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Seeded k-means++ initialisation followed by Lloyd iterations.
///
/// Stops when no centroid moves by more than `tol` (Euclidean) or after
/// `max_iters`. A cluster that loses all its points is re-seeded with the
/// point currently farthest from its own centroid.
pub fn kmeans(features: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let (n, d) = features.dim();
    let k = cfg.k;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} points for k = {k}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("features contain non-finite values".into()));
    }
    let x = features.as_standard_layout().into_owned();
    let row = |i: usize| &x.as_slice().expect("standard layout")[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // k-means++
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(row(i), row(pick)));
        }
    }

    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let assign_all = |centroids: &Array2<f64>, labels: &mut [usize], dists: &mut [f64]| {
        let view = centroids.view();
        let mut total = 0.0;
        for i in 0..n {
            let (j, dd) = nearest(&view, row(i));
            labels[i] = j;
            dists[i] = dd;
            total += dd;
        }
        total / n as f64
    };

    let mut history = vec![assign_all(&centroids, &mut labels, &mut dists)];
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            let mut s = sums.row_mut(labels[i]);
            s.iter_mut().zip(row(i)).for_each(|(a, b)| *a += b);
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                next.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k leaves a candidate");
                taken[far] = true;
                next.row_mut(j).assign(&x.row(far));
            }
        }
        let shift = (&next - &centroids)
            .outer_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let distortion = assign_all(&centroids, &mut labels, &mut dists);
        let prev = *history.last().expect("seeded");
        // Lloyd never increases distortion; the slack absorbs summation order.
        assert!(
            distortion <= prev + 1e-9 * prev.max(1.0),
            "k-means distortion rose from {prev} to {distortion}"
        );
        history.push(distortion);
        if shift < cfg.tol {
            break;
        }
    }
    Ok(KMeansFit {
        centroids,
        history,
        iterations,
    })
}

/// Fits a codebook on per-dimension standardized features.
pub fn kmeans_fit(features: ArrayView2<f64>, cfg: &KMeansConfig, source_tag: SourceTag) -> Result<UnitCodebook> {
    let (n, _) = features.dim();
    if n < cfg.k.max(1) {
        return Err(Error::InsufficientData(format!("{n} points for k = {}", cfg.k)));
    }
    let mean = features.mean_axis(Axis(0)).expect("n >= 1");
    let std = features
        .var_axis(Axis(0), 0.0)
        .mapv(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
    let normalized = (&features - &mean) / &std;
    let fit = kmeans(normalized.view(), cfg)?;
    // stored at f32 precision so a saved codebook assigns identically
    let f32_round = |v: f64| v as f32 as f64;
    Ok(UnitCodebook {
        fit_distortion: fit.distortion(),
        centroids: fit.centroids.mapv(f32_round),
        mean: mean.mapv(f32_round),
        std: std.mapv(f32_round),
        source_tag,
    })
}

impl UnitCodebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Standardizes raw feature rows with the stored statistics.
    pub fn normalize(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        if frames.ncols() != self.dim() {
            return Err(Error::shape(
                "assign",
                format!("frames have {} dims, codebook has {}", frames.ncols(), self.dim()),
            ));
        }
        Ok((&frames - &self.mean) / &self.std)
    }

    /// Nearest-centroid ids for raw (unnormalized) frames.
    pub fn assign(&self, frames: ArrayView2<f64>) -> Result<DiscreteUnitSeq> {
        let z = self.normalize(frames)?;
        let view = self.centroids.view();
        let ids = z
            .outer_iter()
            .map(|r| nearest(&view, r.as_slice().expect("owned row")).0)
            .collect();
        Ok(DiscreteUnitSeq { ids, k: self.k() })
    }

    /// Mean squared distance to the nearest centroid, in normalized space.
    pub fn distortion(&self, frames: ArrayView2<f64>) -> Result<f64> {
        let z = self.normalize(frames)?;
        let view = self.centroids.view();
        let total: f64 = z
            .outer_iter()
            .map(|r| nearest(&view, r.as_slice().expect("owned row")).1)
            .sum();
        Ok(total / z.nrows().max(1) as f64)
    }

    /// Centroids mapped back to the raw feature space.
    pub fn raw_centroids(&self) -> Array2<f64> {
        &self.centroids * &self.std + &self.mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(k: usize) -> KMeansConfig {
        KMeansConfig {
            k,
            ..Default::default()
        }
    }

    fn sorted_1d(c: &Array2<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = c.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn two_separated_points() {
        let fit = kmeans(array![[0.0], [10.0]].view(), &cfg(2)).unwrap();
        assert_eq!(sorted_1d(&fit.centroids), vec![0.0, 10.0]);
        assert_eq!(fit.distortion(), 0.0);
    }

    #[test]
    fn four_points_two_clusters() {
        let fit = kmeans(array![[0.0], [1.0], [9.0], [10.0]].view(), &cfg(2)).unwrap();
        assert_eq!(sorted_1d(&fit.centroids), vec![0.5, 9.5]);
        // mean squared distance: four points each 0.5 away
        assert!((fit.distortion() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        let err = kmeans(array![[0.0], [1.0]].view(), &cfg(3)).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn assign_centroids_in_order() {
        let data = array![[0.0, 0.0], [5.0, 1.0], [-3.0, 4.0], [2.0, -6.0], [1.0, 1.0]];
        let cb = kmeans_fit(data.view(), &cfg(5), SourceTag::Mfcc).unwrap();
        let ids = cb.assign(cb.raw_centroids().view()).unwrap().ids;
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = UnitCodebook {
            centroids: array![[-5.0], [-1.0], [7.0], [8.0], [1.0]],
            mean: array![0.0],
            std: array![1.0],
            source_tag: SourceTag::Mfcc,
            fit_distortion: 0.0,
        };
        assert_eq!(cb.assign(array![[0.0]].view()).unwrap().ids, vec![1]);
        assert!(cb.assign(array![[0.0, 1.0]].view()).is_err());
    }
}
