use std::collections::HashMap;

use super::kernels::{axpy, dot, matmul, matmul_nt, matmul_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-8;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    MaskReplace {
        x: Var,
        emb: Var,
        mask: Vec<bool>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    L1 {
        x: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Vec<f64>>,
    leaves: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    /// One buffer per parameter of the store, zero when a parameter did not
    /// take part in the loss.
    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        &self.params[id.index()]
    }

    /// Gradient with respect to an input created by [`Tape::input`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Parameters are read from a borrowed [`ParamStore`]; a tape is cheap to
/// create, so every forward pass gets its own and concurrent inference on a
/// shared store needs no locking.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.params.get(id);
        let value = Tensor::new(p.shape.clone(), p.data.iter().map(|&x| x as f64).collect())
            .expect("parameter shape is consistent");
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_nt", Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b])
    }

    /// `x · wᵀ + b` with `x: [T, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, din) = self.dims2(x, "linear")?;
        let (dout, din2) = self.dims2(w, "linear")?;
        if din != din2 || self.value(b).numel() != dout {
            return Err(Error::shape(
                "linear",
                format!(
                    "x [{t}, {din}], w [{dout}, {din2}], b {:?}",
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = matmul_nt(self.value(x).data(), self.value(w).data(), t, din, dout);
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(dout) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push("linear", Tensor::new(vec![t, dout], out)?, Op::Linear { x, w, b }, &[x, w, b])
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Normalizes every row to zero mean and unit variance, then applies
    /// the per-feature affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (t, d) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", format!("feature width {d} vs affine params")));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t * d];
        let mut rstd = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Valid (unpadded) strided 1-D convolution over time.
    ///
    /// `x: [L, C_in]` (time-major), `w: [C_out, kernel·C_in]` with the
    /// kernel tap as the slow index, `b: [C_out]`. Output length is
    /// `floor((L − kernel) / stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (len, cin) = self.dims2(x, "conv1d")?;
        let (cout, kc) = self.dims2(w, "conv1d")?;
        if kernel == 0 || stride == 0 {
            return Err(Error::shape("conv1d", "kernel and stride must be positive"));
        }
        if kc != kernel * cin || self.value(b).numel() != cout {
            return Err(Error::shape(
                "conv1d",
                format!("weight [{cout}, {kc}] does not match kernel {kernel} x {cin} channels"),
            ));
        }
        if len < kernel {
            return Err(Error::shape("conv1d", format!("input length {len} < kernel {kernel}")));
        }
        let lout = (len - kernel) / stride + 1;
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; lout * cout];
        for t in 0..lout {
            let patch = &xs[t * stride * cin..(t * stride + kernel) * cin];
            let row = &mut out[t * cout..(t + 1) * cout];
            for (o, r) in row.iter_mut().enumerate() {
                *r = bs[o] + dot(&ws[o * kc..(o + 1) * kc], patch);
            }
        }
        self.push(
            "conv1d",
            Tensor::new(vec![lout, cout], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
            },
            &[x, w, b],
        )
    }

    /// Multi-head scaled dot-product attention over rows of `q`, `k`, `v`
    /// (`[T, d]` each). Positions with `key_mask[j] == true` are excluded
    /// as keys; a query with no admissible key produces zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var> {
        let (t, d) = self.dims2(q, "attention")?;
        if self.value(k).shape() != [t, d] || self.value(v).shape() != [t, d] {
            return Err(Error::shape("attention", "q, k and v must share shape [T, d]"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if let Some(m) = key_mask {
            if m.len() != t {
                return Err(Error::shape("attention", format!("mask length {} vs T={t}", m.len())));
            }
        }
        let probs = attention_probs(self.value(q), self.value(k), heads, key_mask)?;
        let dh = d / heads;
        let vs = self.value(v).data();
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p != 0.0 {
                        axpy(p, &vs[j * d + off..j * d + off + dh], orow);
                    }
                }
            }
        }
        self.push(
            "attention",
            Tensor::new(vec![t, d], out)?,
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        )
    }

    /// Replaces rows where `mask` is true with the vector `emb`.
    pub fn mask_replace(&mut self, x: Var, emb: Var, mask: &[bool]) -> Result<Var> {
        let (t, d) = self.dims2(x, "mask_replace")?;
        if self.value(emb).numel() != d || mask.len() != t {
            return Err(Error::shape("mask_replace", format!("x [{t}, {d}], mask {}", mask.len())));
        }
        let mut out = self.value(x).data().to_vec();
        let e = self.value(emb).data();
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            out[i * d..(i + 1) * d].copy_from_slice(e);
        }
        self.push(
            "mask_replace",
            Tensor::new(vec![t, d], out)?,
            Op::MaskReplace {
                x,
                emb,
                mask: mask.to_vec(),
            },
            &[x, emb],
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.dims2(x, "l2_normalize")?;
        let xs = self.value(x).data();
        let mut norms = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let row = &xs[i * d..(i + 1) * d];
            let n = dot(row, row).sqrt().max(NORMALIZE_EPS);
            norms[i] = n;
            for j in 0..d {
                out[i * d + j] = row[j] / n;
            }
        }
        self.push(
            "l2_normalize",
            Tensor::new(vec![t, d], out)?,
            Op::L2Normalize { x, norms },
            &[x],
        )
    }

    /// Mean cross-entropy of `logits: [T, K]` against `targets` over the
    /// rows where `mask` is true. Unmasked rows do not influence the value
    /// or the gradient. With no masked row the loss is zero.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, k) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("T={t}, targets {}, mask {}", targets.len(), mask.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::shape("cross_entropy", format!("target {bad} >= classes {k}")));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![0.0; t * k];
        let mut total = 0.0;
        let mut count = 0;
        for i in (0..t).filter(|&i| mask[i]) {
            let row = &ls[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let e = (l - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            total += z.ln() + max - row[targets[i]];
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Mean absolute error against a constant target of the same shape.
    pub fn l1_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.value(x).shape() != target.shape() {
            return Err(Error::shape(
                "l1_loss",
                format!("{:?} vs {:?}", self.value(x).shape(), target.shape()),
            ));
        }
        let xs = self.value(x).data();
        let n = xs.len().max(1) as f64;
        let s: f64 = xs.iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        self.push(
            "l1_loss",
            Tensor::scalar(s / n),
            Op::L1 {
                x,
                target: target.data().to_vec(),
            },
            &[x],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.needs_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let mut leaves = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.needs_grad {
                        leaves.insert(Var(i), g);
                    }
                }
                Op::Param(id) => {
                    for (a, b) in param_grads[id.index()].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                op => self.backprop_op(op, &g, &mut grads)?,
            }
        }
        Ok(Gradients {
            params: param_grads,
            leaves,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; contrib.len()]);
        for (a, b) in buf.iter_mut().zip(contrib) {
            *a += b;
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_op(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!("handled by caller"),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a, "matmul")?;
                let n = self.dims2(b, "matmul")?.1;
                if self.wants(a) {
                    let da = matmul_nt(g, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, &da);
                }
                if self.wants(b) {
                    let db = matmul_tn(self.value(a).data(), g, m, k, n);
                    self.accumulate(grads, b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(a, "matmul_nt")?;
                let n = self.dims2(b, "matmul_nt")?.0;
                if self.wants(a) {
                    let da = matmul(g, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, &da);
                }
                if self.wants(b) {
                    let db = matmul_tn(g, self.value(a).data(), m, n, k);
                    self.accumulate(grads, b, &db);
                }
            }
            Op::Linear { x, w, b } => {
                let (t, din) = self.dims2(x, "linear")?;
                let dout = self.dims2(w, "linear")?.0;
                if self.wants(x) {
                    let dx = matmul(g, self.value(w).data(), t, dout, din);
                    self.accumulate(grads, x, &dx);
                }
                if self.wants(w) {
                    let dw = matmul_tn(g, self.value(x).data(), t, dout, din);
                    self.accumulate(grads, w, &dw);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks_exact(dout) {
                        axpy(1.0, row, &mut db);
                    }
                    self.accumulate(grads, b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g);
                self.accumulate(grads, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g);
                if self.wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(grads, b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let da: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, a, &da);
                }
                if self.wants(b) {
                    let db: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| c * v).collect();
                self.accumulate(grads, a, &da);
            }
            Op::Square(a) => {
                let da: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(x, y)| 2.0 * x * y).collect();
                self.accumulate(grads, a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(x, &y)| x * gelu_grad(y))
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(a).numel()];
                self.accumulate(grads, a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                let da = vec![g[0] / n.max(1) as f64; n];
                self.accumulate(grads, a, &da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref rstd,
            } => {
                let (t, d) = self.dims2(x, "layer_norm")?;
                let gm = self.value(gamma).data();
                if self.wants(gamma) || self.wants(beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..t {
                        for j in 0..d {
                            dg[j] += g[i * d + j] * xhat[i * d + j];
                            db[j] += g[i * d + j];
                        }
                    }
                    self.accumulate(grads, gamma, &dg);
                    self.accumulate(grads, beta, &db);
                }
                if self.wants(x) {
                    let mut dx = vec![0.0; t * d];
                    let mut dxhat = vec![0.0; d];
                    for i in 0..t {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            dxhat[j] = g[i * d + j] * gm[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[i * d + j];
                        }
                        let (s1, s2) = (s1 / d as f64, s2 / d as f64);
                        for j in 0..d {
                            dx[i * d + j] = rstd[i] * (dxhat[j] - s1 - xhat[i * d + j] * s2);
                        }
                    }
                    self.accumulate(grads, x, &dx);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
            } => {
                let (len, cin) = self.dims2(x, "conv1d")?;
                let (cout, kc) = self.dims2(w, "conv1d")?;
                let lout = g.len() / cout;
                let (xs, ws) = (self.value(x).data(), self.value(w).data());
                if self.wants(w) {
                    let mut dw = vec![0.0; cout * kc];
                    for t in 0..lout {
                        let patch = &xs[t * stride * cin..(t * stride + kernel) * cin];
                        for o in 0..cout {
                            let s = g[t * cout + o];
                            if s != 0.0 {
                                axpy(s, patch, &mut dw[o * kc..(o + 1) * kc]);
                            }
                        }
                    }
                    self.accumulate(grads, w, &dw);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        axpy(1.0, row, &mut db);
                    }
                    self.accumulate(grads, b, &db);
                }
                if self.wants(x) {
                    let mut dx = vec![0.0; len * cin];
                    for t in 0..lout {
                        let dpatch = &mut dx[t * stride * cin..(t * stride + kernel) * cin];
                        for o in 0..cout {
                            let s = g[t * cout + o];
                            if s != 0.0 {
                                axpy(s, &ws[o * kc..(o + 1) * kc], dpatch);
                            }
                        }
                    }
                    self.accumulate(grads, x, &dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                ref probs,
            } => {
                let (t, d) = self.dims2(q, "attention")?;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut dp = vec![0.0; t];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..t {
                        let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                        let go = &g[i * d + off..i * d + off + dh];
                        let mut s = 0.0;
                        for j in 0..t {
                            if prow[j] == 0.0 {
                                dp[j] = 0.0;
                                continue;
                            }
                            dp[j] = dot(go, &vs[j * d + off..j * d + off + dh]);
                            s += prow[j] * dp[j];
                            axpy(prow[j], go, &mut dv[j * d + off..j * d + off + dh]);
                        }
                        for j in 0..t {
                            let ds = prow[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            axpy(ds, &ks[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                            axpy(ds, &qs[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                        }
                    }
                }
                self.accumulate(grads, q, &dq);
                self.accumulate(grads, k, &dk);
                self.accumulate(grads, v, &dv);
            }
            Op::MaskReplace { x, emb, ref mask } => {
                let (_, d) = self.dims2(x, "mask_replace")?;
                if self.wants(x) {
                    let mut dx = g.to_vec();
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        dx[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                    }
                    self.accumulate(grads, x, &dx);
                }
                if self.wants(emb) {
                    let mut de = vec![0.0; d];
                    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        axpy(1.0, &g[i * d..(i + 1) * d], &mut de);
                    }
                    self.accumulate(grads, emb, &de);
                }
            }
            Op::L2Normalize { x, ref norms } => {
                let (t, d) = self.dims2(x, "l2_normalize")?;
                // y is this node's own value; recover it from the input.
                let xs = self.value(x).data();
                let mut dx = vec![0.0; t * d];
                for i in 0..t {
                    let n = norms[i];
                    let y: Vec<f64> = xs[i * d..(i + 1) * d].iter().map(|v| v / n).collect();
                    let gy = &g[i * d..(i + 1) * d];
                    let proj = dot(&y, gy);
                    for j in 0..d {
                        dx[i * d + j] = (gy[j] - y[j] * proj) / n;
                    }
                }
                self.accumulate(grads, x, &dx);
            }
            Op::MaskedCrossEntropy {
                logits,
                ref targets,
                ref mask,
                ref probs,
                count,
            } => {
                let (t, k) = self.dims2(logits, "cross_entropy")?;
                let mut dl = vec![0.0; t * k];
                if count > 0 {
                    let s = g[0] / count as f64;
                    for i in (0..t).filter(|&i| mask[i]) {
                        for j in 0..k {
                            dl[i * k + j] = s * probs[i * k + j];
                        }
                        dl[i * k + targets[i]] -= s;
                    }
                }
                self.accumulate(grads, logits, &dl);
            }
            Op::L1 { x, ref target } => {
                let xs = self.value(x).data();
                let n = xs.len().max(1) as f64;
                let dx: Vec<f64> = xs
                    .iter()
                    .zip(target)
                    .map(|(a, b)| {
                        let s = a - b;
                        let sign = if s > 0.0 {
                            1.0
                        } else if s < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[0] * sign / n
                    })
                    .collect();
                self.accumulate(grads, x, &dx);
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Attention probabilities, laid out `[head][query][key]`.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize, key_mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let (t, d) = q.dims2("attention")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks) = (q.data(), k.data());
    let masked = |j: usize| key_mask.is_some_and(|m| m[j]);
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let qi = &qs[i * d + off..i * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate() {
                if masked(j) {
                    continue;
                }
                *r = dot(qi, &ks[j * d + off..j * d + off + dh]) * scale;
                max = max.max(*r);
            }
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|r| *r = 0.0);
                continue;
            }
            let mut z = 0.0;
            for (j, r) in row.iter_mut().enumerate() {
                if masked(j) {
                    *r = 0.0;
                } else {
                    *r = (*r - max).exp();
                    z += *r;
                }
            }
            row.iter_mut().for_each(|r| *r /= z);
        }
    }
    Ok(probs)
}
