//! Recording tape for reverse-mode differentiation.
//!
//! Each operation appends a node holding the computed value, its input
//! references, and whatever the backward rule needs. Nodes are stored in
//! topological order by construction, so [`Tape::backward`] is a single
//! reverse sweep. Gradients are only propagated toward leaves that require
//! them; frozen parameters cost nothing on the backward pass and never get a
//! gradient buffer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn gelu_value(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: f64 },
    AddBias { a: Var, bias: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, gain: Var, bias: Var, stats: Vec<f64> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Sum { a: Var },
    Mean { a: Var },
    BceLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    op: Op,
    value: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Gradients of one backward pass, addressable by the leaf [`Var`]s.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    numels: Vec<usize>,
}

impl Gradients {
    /// Gradient of a leaf if any path from the loss reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots[v.0].as_deref()
    }

    /// Gradient of a leaf; zeros if the loss did not reach it.
    pub fn take(&mut self, v: Var) -> Vec<f64> {
        self.slots[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.numels[v.0]])
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            value,
            shape,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register a tensor as a leaf. The data is snapshotted; later mutation
    /// of the tensor does not affect this tape.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf,
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
        )
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, data: &[f64], shape: &[usize]) -> Var {
        self.push(Op::Leaf, data.to_vec(), shape.to_vec(), false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("tape node is always consistent")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {:?}", s))),
        }
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: lhs [{m}, {k}] rhs [{k2}, {n}]"),
            ));
        }
        let value = matmul_nn(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, value, vec![m, n], needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose { a }, out, vec![c, r], needs))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                op_name,
                format!(
                    "lhs {:?} rhs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            ));
        }
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, value, shape, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(Op::AddScalar { a }, value, shape, needs)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(Op::MulScalar { a, c }, value, shape, needs)
    }

    /// Row-wise bias: `a` is [r, c], `bias` is [c]. This is the only
    /// non-scalar broadcast in the engine and it is explicit.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "add_bias")?;
        match self.nodes[bias.0].shape.as_slice() {
            [len] if *len == c => {}
            s => {
                return Err(Error::shape(
                    "add_bias",
                    format!("matrix [{r}, {c}] with bias {:?}", s),
                ))
            }
        }
        let mut value = self.value(a).to_vec();
        let bv = self.value(bias);
        for row in value.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddBias { a, bias }, value, vec![r, c], needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(op, value, shape, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_value, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    // ── structured ──────────────────────────────────────────────────

    /// Exp-normalization along `axis` with max subtraction for stability.
    /// Rank-1 tensors use axis 0; rank-2 tensors accept axis 0 or 1.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (lanes, len, stride, lane_base): (usize, usize, usize, fn(usize, usize, usize) -> usize) =
            match (shape.as_slice(), axis) {
                ([_n], 0) => (1, shape[0], 1, |_, _, _| 0),
                ([r, _c], 1) => (*r, shape[1], 1, |lane, _len, cols| lane * cols),
                ([_r, c], 0) => (*c, shape[0], *c, |lane, _len, _cols| lane),
                (s, ax) => {
                    return Err(Error::shape(
                        "softmax",
                        format!("axis {ax} invalid for shape {:?}", s),
                    ))
                }
            };
        let cols = *shape.last().unwrap_or(&1);
        let src = self.value(a).to_vec();
        let mut out = vec![0.0; src.len()];
        for lane in 0..lanes {
            let base = lane_base(lane, len, cols);
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(src[base + i * stride]);
            }
            let mut total = 0.0;
            for i in 0..len {
                let e = (src[base + i * stride] - max).exp();
                out[base + i * stride] = e;
                total += e;
            }
            for i in 0..len {
                out[base + i * stride] /= total;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax { a, axis }, out, shape, needs))
    }

    /// Per-row standardization of an [r, d] matrix followed by elementwise
    /// gain and bias (both [d]). Uses the biased variance.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.dims2(a, "layer_norm")?;
        if d == 0 {
            return Err(Error::shape("layer_norm", "zero feature dimension"));
        }
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            match self.nodes[v.0].shape.as_slice() {
                [len] if *len == d => {}
                s => {
                    return Err(Error::shape(
                        "layer_norm",
                        format!("{name} {:?} against features [{d}]", s),
                    ))
                }
            }
        }
        let src = self.value(a).to_vec();
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let mut out = vec![0.0; src.len()];
        let mut stats = Vec::with_capacity(2 * r);
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            stats.push(mean);
            stats.push(istd);
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * istd * gv[j] + bv[j];
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Op::LayerNorm { a, gain, bias, stats },
            out,
            vec![r, d],
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of [{r}, {c}]", start + len),
            ));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SliceCols { a, start }, out, vec![r, len], needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts"));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.dims2(p, "concat_cols")?;
            if rp != r {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts disagree: {r} vs {rp}"),
                ));
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p);
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols { parts: parts.to_vec() },
            out,
            vec![r, total],
            needs,
        ))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum { a }, vec![total], vec![], needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let total: f64 = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(Op::Mean { a }, vec![total / n as f64], vec![], needs)
    }

    /// Mean binary cross-entropy from logits, computed in the stable form
    /// max(z, 0) - z*t + ln(1 + e^{-|z|}). Targets are captured as constants.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits against {} targets", z.len(), targets.len()),
            ));
        }
        let n = z.len() as f64;
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(z, t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let needs = self.needs(logits);
        Ok(self.push(
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            vec![total / n],
            vec![],
            needs,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns the gradients of every
    /// grad-requiring leaf reachable from it; leaves the tape intact.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue; // keep the accumulated gradient
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        let numels = self.nodes.iter().map(|n| n.value.len()).collect();
        Ok(Gradients { slots: grads, numels })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(&contribution) {
                    *b += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => unreachable!("leaves are terminal"),

            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.needs(*a) {
                    // dA += g · Bᵀ
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    matmul_nt_acc(g, self.value(*b), buf, m, n, k);
                }
                if self.needs(*b) {
                    // dB += Aᵀ · g
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    matmul_tn_acc(self.value(*a), g, buf, m, k, n);
                }
            }

            Op::Transpose { a } => {
                let (c, r) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        d[j * c + i] = g[i * r + j];
                    }
                }
                self.accum(grads, *a, d);
            }

            Op::Add { a, b } => {
                self.accum(grads, *a, g.to_vec());
                self.accum(grads, *b, g.to_vec());
            }

            Op::Sub { a, b } => {
                self.accum(grads, *a, g.to_vec());
                self.accum(grads, *b, g.iter().map(|x| -x).collect());
            }

            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let d = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    self.accum(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    self.accum(grads, *b, d);
                }
            }

            Op::AddScalar { a } => self.accum(grads, *a, g.to_vec()),

            Op::MulScalar { a, c } => {
                self.accum(grads, *a, g.iter().map(|x| c * x).collect());
            }

            Op::AddBias { a, bias } => {
                self.accum(grads, *a, g.to_vec());
                if self.needs(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let mut d = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, v) in d.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum(grads, *bias, d);
                }
            }

            Op::Relu { a } => {
                let d = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(grads, *a, d);
            }

            Op::Gelu { a } => {
                let d = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| g * gelu_derivative(*x))
                    .collect();
                self.accum(grads, *a, d);
            }

            Op::Sigmoid { a } => {
                let y = &self.nodes[idx].value;
                let d = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accum(grads, *a, d);
            }

            Op::Softmax { a, axis } => {
                let shape = &self.nodes[idx].shape;
                let y = &self.nodes[idx].value;
                let (lanes, len, stride): (usize, usize, usize) = match (shape.as_slice(), axis) {
                    ([n], 0) => (1, *n, 1),
                    ([r, c], 1) => (*r, *c, 1),
                    ([r, c], 0) => (*c, *r, *c),
                    _ => unreachable!("validated on record"),
                };
                let cols = *shape.last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for lane in 0..lanes {
                    let base = match (shape.len(), axis) {
                        (2, 1) => lane * cols,
                        (2, 0) => lane,
                        _ => 0,
                    };
                    let mut dot = 0.0;
                    for i in 0..len {
                        let k = base + i * stride;
                        dot += g[k] * y[k];
                    }
                    for i in 0..len {
                        let k = base + i * stride;
                        d[k] = y[k] * (g[k] - dot);
                    }
                }
                self.accum(grads, *a, d);
            }

            Op::LayerNorm { a, gain, bias, stats } => {
                let d_feat = self.nodes[a.0].shape[1];
                let rows = self.nodes[a.0].shape[0];
                let x = self.value(*a);
                let gv = self.value(*gain);
                let need_a = self.needs(*a);
                let need_g = self.needs(*gain);
                let need_b = self.needs(*bias);
                let mut da = if need_a { vec![0.0; x.len()] } else { Vec::new() };
                let mut dg = if need_g { vec![0.0; d_feat] } else { Vec::new() };
                let mut db = if need_b { vec![0.0; d_feat] } else { Vec::new() };
                for i in 0..rows {
                    let mean = stats[2 * i];
                    let istd = stats[2 * i + 1];
                    let row = &x[i * d_feat..(i + 1) * d_feat];
                    let grow = &g[i * d_feat..(i + 1) * d_feat];
                    if need_g || need_b {
                        for j in 0..d_feat {
                            let xhat = (row[j] - mean) * istd;
                            if need_g {
                                dg[j] += grow[j] * xhat;
                            }
                            if need_b {
                                db[j] += grow[j];
                            }
                        }
                    }
                    if need_a {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d_feat {
                            let gg = grow[j] * gv[j];
                            let xhat = (row[j] - mean) * istd;
                            m1 += gg;
                            m2 += gg * xhat;
                        }
                        m1 /= d_feat as f64;
                        m2 /= d_feat as f64;
                        for j in 0..d_feat {
                            let gg = grow[j] * gv[j];
                            let xhat = (row[j] - mean) * istd;
                            da[i * d_feat + j] = istd * (gg - m1 - xhat * m2);
                        }
                    }
                }
                if need_a {
                    self.accum(grads, *a, da);
                }
                if need_g {
                    self.accum(grads, *gain, dg);
                }
                if need_b {
                    self.accum(grads, *bias, db);
                }
            }

            Op::SliceCols { a, start } => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let len = self.nodes[idx].shape[1];
                if self.needs(*a) {
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; r * c]);
                    for i in 0..r {
                        for j in 0..len {
                            buf[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }

            Op::ConcatCols { parts } => {
                let r = self.nodes[idx].shape[0];
                let total = self.nodes[idx].shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.needs(p) {
                        let mut d = vec![0.0; r * w];
                        for i in 0..r {
                            d[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accum(grads, p, d);
                    }
                    offset += w;
                }
            }

            Op::Sum { a } => {
                let n = self.nodes[a.0].value.len();
                self.accum(grads, *a, vec![g[0]; n]);
            }

            Op::Mean { a } => {
                let n = self.nodes[a.0].value.len();
                self.accum(grads, *a, vec![g[0] / n as f64; n]);
            }

            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits);
                let n = z.len() as f64;
                let d = z
                    .iter()
                    .zip(targets)
                    .map(|(z, t)| g[0] * (sigmoid(*z) - t) / n)
                    .collect();
                self.accum(grads, *logits, d);
            }
        }
    }
}

// ── raw matmul kernels ──────────────────────────────────────────────

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || k == 0 || n == 0 {
        return c;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// c[m×k] += a[m×n] · b[k×n]ᵀ
fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
