use rand_chacha::ChaCha8Rng;

use super::{init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Fully connected layer, weight `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            &[d_out, d_in],
            init::xavier_uniform(rng, d_in, d_out, d_in * d_out),
        );
        let b = store.add(format!("{name}.bias"), &[d_out], init::zeros(d_out));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), &[d], init::ones(d)),
            beta: store.add(format!("{name}.beta"), &[d], init::zeros(d)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b)
    }
}

/// Strided temporal convolution over `[L, C_in]` inputs.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = c_in * kernel;
        let w = store.add(
            format!("{name}.weight"),
            &[c_out, fan_in],
            init::xavier_uniform(rng, fan_in, c_out, c_out * fan_in),
        );
        let b = store.add(format!("{name}.bias"), &[c_out], init::zeros(c_out));
        Self { w, b, kernel, stride }
    }

    pub fn output_len(&self, len: usize) -> usize {
        if len < self.kernel {
            0
        } else {
            (len - self.kernel) / self.stride + 1
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.conv1d(x, w, b, self.kernel, self.stride)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "d_model {d} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let a = tape.attention(q, k, v, self.heads, key_mask)?;
        self.out.forward(tape, a)
    }
}

/// Two-layer GELU MLP with hidden width `4·d`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d, 4 * d),
            down: Linear::new(store, rng, &format!("{name}.down"), 4 * d, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, h)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let h = self.attn.forward(tape, h, key_mask)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, x)?;
        let h = self.ff.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Fixed sinusoidal position table `[t, d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape matches")
}
