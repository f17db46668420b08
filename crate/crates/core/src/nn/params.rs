use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Gradients;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor. Values are stored in single precision; gradients are
/// accumulated in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f64>>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Named parameters of one model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name} data does not match shape {shape:?}"
        );
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
            grad: None,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Replaces the value of a named parameter, checking its shape.
    pub fn assign(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Corrupt(format!("unexpected tensor {name}")))?;
        let p = &mut self.params[id.0];
        if p.shape != shape {
            return Err(Error::Corrupt(format!(
                "tensor {name} has shape {shape:?}, model expects {:?}",
                p.shape
            )));
        }
        p.data = data;
        Ok(())
    }

    /// Drops all gradients.
    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `scale · g` into each parameter's gradient buffer.
    pub fn accumulate_grads(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(grads.params()) {
            let buf = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, v) in buf.iter_mut().zip(g) {
                *b += scale * v;
            }
        }
    }

    /// Global L2 norm of all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// FNV-1a over names, shapes and value bits. Equal checksums mean
    /// bitwise-identical parameters with overwhelming probability.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100000001b3;
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in &p.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for v in &p.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Seeded initializers.
pub mod init {
    use super::*;

    /// Xavier/Glorot uniform: `U(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
    pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f32> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(rng, a, n)
    }

    pub fn uniform(rng: &mut ChaCha8Rng, bound: f64, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
    }

    pub fn zeros(n: usize) -> Vec<f32> {
        vec![0.0; n]
    }

    pub fn ones(n: usize) -> Vec<f32> {
        vec![1.0; n]
    }
}
