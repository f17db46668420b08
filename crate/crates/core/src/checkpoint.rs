//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "WSPR" | u32 version | u32 kind | u64 config_len | config (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u16 name_len | name | u8 rank | u64 dims[rank] | f32 data[∏dims]
//! ```

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::stu::{Stu, StuConfig};
use crate::units::{SourceTag, UnitCodebook};
use crate::uts::{Uts, UtsConfig};

pub const MAGIC: [u8; 4] = *b"WSPR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Stu,
    Uts,
    Codebook,
}

impl ModelKind {
    fn code(self) -> u32 {
        match self {
            ModelKind::Stu => 0,
            ModelKind::Uts => 1,
            ModelKind::Codebook => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(ModelKind::Stu),
            1 => Ok(ModelKind::Uts),
            2 => Ok(ModelKind::Codebook),
            other => Err(Error::Corrupt(format!("unknown model kind {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Stu => "stu",
            ModelKind::Uts => "uts",
            ModelKind::Codebook => "codebook",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.code().to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("tensor name too long: {}", t.name)))?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Invalid(format!("tensor {} rank too high", t.name)))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Invalid(format!("tensor {} data does not match its shape", t.name)));
            }
            if let Some(v) = t.data.iter().find(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("tensor {} holds non-finite value {v}", t.name)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "header")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let kind = ModelKind::from_code(r.u32("header")?)?;
        let config_len = r.u64("config")?;
        let config_len = usize::try_from(config_len).map_err(|_| Error::Truncated("config".into()))?;
        let config = String::from_utf8(r.take(config_len, "config")?.to_vec())
            .map_err(|_| Error::Corrupt("config is not UTF-8".into()))?;
        let count = r.u32("tensor table")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let what = format!("tensor #{i}");
            let name_len = r.u16(&what)? as usize;
            let name = String::from_utf8(r.take(name_len, &what)?.to_vec())
                .map_err(|_| Error::Corrupt(format!("{what} name is not UTF-8")))?;
            let rank = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64(&name)?;
                shape.push(usize::try_from(d).map_err(|_| Error::Truncated(name.clone()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Corrupt(format!("tensor {name} shape overflows")))?;
            let raw = r.take(numel, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, config, tensors })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp-ckpt");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::KindMismatch {
                expected: kind.as_str().into(),
                found: self.kind.as_str().into(),
            });
        }
        Ok(())
    }

    fn from_params<C: Serialize>(kind: ModelKind, config: &C, params: &ParamStore) -> Result<Self> {
        Ok(Self {
            kind,
            config: serde_json::to_string(config).map_err(|e| Error::Invalid(e.to_string()))?,
            tensors: params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.clone(),
                })
                .collect(),
        })
    }

    fn parse_config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_str(&self.config).map_err(|e| Error::Corrupt(format!("config: {e}")))
    }

    /// Assigns every stored tensor; the store must have exactly these names.
    fn fill(&self, params: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for t in &self.tensors {
            params.assign(&t.name, &t.shape, t.data.clone())?;
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(what.to_string())),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Stu {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_params(ModelKind::Stu, &self.config, &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Stu)?;
        let config: StuConfig = ckpt.parse_config()?;
        let mut model = Stu::new(config)?;
        ckpt.fill(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Uts {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_params(ModelKind::Uts, &self.config, &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Uts)?;
        let config: UtsConfig = ckpt.parse_config()?;
        let mut model = Uts::new(config)?;
        ckpt.fill(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookMeta {
    source_tag: SourceTag,
    fit_distortion: f64,
    k: usize,
    dim: usize,
}

impl UnitCodebook {
    /// Values are stored as f32; codebooks from [`crate::units::kmeans_fit`]
    /// are already rounded to f32 precision, so the roundtrip is exact.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CodebookMeta {
            source_tag: self.source_tag,
            fit_distortion: self.fit_distortion,
            k: self.k(),
            dim: self.dim(),
        };
        let f = |name: &str, shape: Vec<usize>, it: &mut dyn Iterator<Item = &f64>| NamedTensor {
            name: name.into(),
            shape,
            data: it.map(|&v| v as f32).collect(),
        };
        Ok(Checkpoint {
            kind: ModelKind::Codebook,
            config: serde_json::to_string(&meta).map_err(|e| Error::Invalid(e.to_string()))?,
            tensors: vec![
                f("centroids", vec![self.k(), self.dim()], &mut self.centroids.iter()),
                f("mean", vec![self.dim()], &mut self.mean.iter()),
                f("std", vec![self.dim()], &mut self.std.iter()),
            ],
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Codebook)?;
        let meta: CodebookMeta = ckpt.parse_config()?;
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = ckpt.tensor(name)?;
            if t.shape != shape {
                return Err(Error::Corrupt(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
            }
            Ok(t.data.iter().map(|&v| v as f64).collect())
        };
        let centroids = Array2::from_shape_vec((meta.k, meta.dim), get("centroids", &[meta.k, meta.dim])?)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(Self {
            centroids,
            mean: Array1::from(get("mean", &[meta.dim])?),
            std: Array1::from(get("std", &[meta.dim])?),
            source_tag: meta.source_tag,
            fit_distortion: meta.fit_distortion,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
