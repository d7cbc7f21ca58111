//! Reverse-mode differentiation over flat real arrays.
//!
//! Every operation is evaluated eagerly and appended to a linear [`Tape`].
//! Node ids are assigned in creation order, so inputs always precede their
//! consumers and [`Tape::backward`] is a single reverse sweep.
//!
//! Values are stored row-major. Arrays have rank 1 (`[n]`) or rank 2
//! (`[rows, cols]`); scalars are rank-1 arrays of length one. Binary
//! elementwise operations accept a right operand that is either the same
//! shape, a scalar, or a vector matching the last dimension (broadcast over
//! rows).
//!
//! Randomness never enters the tape. Noise is drawn by the caller and passed in
//! as constants, which makes every objective a deterministic function of
//! `(parameters, noise)`.

use crate::error::{dim_err, Error, Result};
use crate::transform;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    ScalarMul(usize, f64),
    MatMul { a: usize, b: usize, transpose_b: bool },
    DiagScale(usize, usize),
    Fwht { a: usize, block: usize, normalized: bool },
    Concat(Vec<usize>),
    Slice { a: usize, start: usize },
    Pad(usize),
    Reshape(usize),
    Relu(usize),
    Tanh(usize),
    Cos(usize),
    Sin(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sqrt(usize),
    Recip(usize),
    Sum(usize),
    Mean(usize),
    GaussianNll { pred: usize, logvar: usize, target: Vec<f64> },
    SoftmaxCe { logits: usize, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Optional attributes for the string-tagged [`Tape::record`] entry point.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub scalar: Option<f64>,
    pub normalized: bool,
    pub block: Option<usize>,
    pub start: usize,
    pub len: Option<usize>,
    pub shape: Option<Vec<usize>>,
    pub transpose_b: bool,
    pub target: Option<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

/// Linear record of primitive operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not depend on any parameter.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, with zeros when it was not reached.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.id].value[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { op, shape, value, requires_grad });
        Var { id: self.nodes.len() - 1 }
    }

    fn leaf(&mut self, value: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Var> {
        if shape.is_empty() || shape.len() > 2 {
            return dim_err(format!("unsupported rank {}", shape.len()));
        }
        if numel(&shape) != value.len() {
            return dim_err(format!(
                "shape {shape:?} does not match {} values",
                value.len()
            ));
        }
        Ok(self.push(Op::Leaf, shape, value, requires_grad))
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape.to_vec(), true)
    }

    /// Differentiable rank-1 input.
    pub fn param_vec(&mut self, value: &[f64]) -> Var {
        let n = value.len();
        self.push(Op::Leaf, vec![n], value.to_vec(), true)
    }

    /// Non-differentiable input (data, noise, masks).
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape.to_vec(), false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![x], false)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn bcast(&self, a: Var, b: Var, what: &str) -> Result<Bcast> {
        let sa = &self.nodes[a.id].shape;
        let sb = &self.nodes[b.id].shape;
        if sa == sb {
            Ok(Bcast::Same)
        } else if numel(sb) == 1 {
            Ok(Bcast::Scalar)
        } else if sb.len() == 1 && sb[0] == last_dim(sa) {
            Ok(Bcast::Row)
        } else {
            dim_err(format!("{what}: cannot broadcast {sb:?} onto {sa:?}"))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(a, b, what)?;
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        let value: Vec<f64> = match bc {
            Bcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => va.iter().map(|&x| f(x, vb[0])).collect(),
            Bcast::Row => {
                let n = vb.len();
                va.iter().enumerate().map(|(i, &x)| f(x, vb[i % n])).collect()
            }
        };
        let shape = self.nodes[a.id].shape.clone();
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(mk(a.id, b.id, bc), shape, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product (with broadcasting of `b`).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.id].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.id].shape.clone();
        let rg = self.rg(&[a.id]);
        self.push(Op::ScalarMul(a.id, c), shape, value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant_scalar(c);
        self.add(a, k)
    }

    /// `a·b` (or `a·bᵀ` when `transpose_b`) for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.nodes[a.id].shape.clone();
        let sb = self.nodes[b.id].shape.clone();
        if sa.len() != 2 || sb.len() != 2 {
            return dim_err("matmul needs rank-2 operands");
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return dim_err(format!("matmul: inner dims {k} and {kb} differ"));
        }
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = va[i * k + p];
                if x == 0.0 {
                    continue;
                }
                if transpose_b {
                    for (j, r) in row.iter_mut().enumerate() {
                        *r += x * vb[j * k + p];
                    }
                } else {
                    let brow = &vb[p * n..(p + 1) * n];
                    for (r, &y) in row.iter_mut().zip(brow) {
                        *r += x * y;
                    }
                }
            }
        }
        let rg = self.rg(&[a.id, b.id]);
        Ok(self.push(Op::MatMul { a: a.id, b: b.id, transpose_b }, vec![m, n], out, rg))
    }

    /// Right-multiplies by `diag(d)`: scales the last axis of `a` by `d`.
    pub fn diag_scale(&mut self, a: Var, d: Var) -> Result<Var> {
        let sa = &self.nodes[a.id].shape;
        let sd = &self.nodes[d.id].shape;
        if sd.len() != 1 || sd[0] != last_dim(sa) {
            return dim_err(format!("diag_scale: diagonal {sd:?} vs operand {sa:?}"));
        }
        let n = sd[0];
        let vd = &self.nodes[d.id].value;
        let value = self.nodes[a.id]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vd[i % n])
            .collect();
        let shape = sa.clone();
        let rg = self.rg(&[a.id, d.id]);
        Ok(self.push(Op::DiagScale(a.id, d.id), shape, value, rg))
    }

    /// Walsh-Hadamard transform of each contiguous chunk of length `block`
    /// along the last axis (the whole last axis when `block` is `None`).
    pub fn fwht(&mut self, a: Var, block: Option<usize>, normalized: bool) -> Result<Var> {
        let shape = self.nodes[a.id].shape.clone();
        let block = block.unwrap_or_else(|| last_dim(&shape));
        if !last_dim(&shape).is_multiple_of(block.max(1)) {
            return dim_err(format!("fwht block {block} does not divide {shape:?}"));
        }
        let mut value = self.nodes[a.id].value.clone();
        transform::fwht_batch_inplace(&mut value, block, normalized)?;
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::Fwht { a: a.id, block, normalized }, shape, value, rg))
    }

    /// Concatenation along the last axis. All leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let lead: Vec<usize> = {
            let s = &self.nodes[first.id].shape;
            s[..s.len() - 1].to_vec()
        };
        let rows = numel(&lead);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.id].shape;
            if s[..s.len() - 1] != lead[..] {
                return dim_err(format!("concat: {s:?} does not match leading {lead:?}"));
            }
            widths.push(last_dim(s));
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[p.id].value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Op::Concat(ids), shape, value, rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.id].shape.clone();
        let w = last_dim(&shape);
        if start + len > w || len == 0 {
            return dim_err(format!("slice {start}..{} out of width {w}", start + len));
        }
        let rows = numel(&shape) / w;
        let src = &self.nodes[a.id].value;
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&src[r * w + start..r * w + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::Slice { a: a.id, start }, out_shape, value, rg))
    }

    /// Zero-pads the last axis up to width `to`.
    pub fn pad(&mut self, a: Var, to: usize) -> Result<Var> {
        let shape = self.nodes[a.id].shape.clone();
        let w = last_dim(&shape);
        if to < w {
            return dim_err(format!("pad to {to} is narrower than {w}"));
        }
        if to == w {
            return Ok(a);
        }
        let rows = numel(&shape) / w;
        let src = &self.nodes[a.id].value;
        let mut value = vec![0.0; rows * to];
        for r in 0..rows {
            value[r * to..r * to + w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = to;
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::Pad(a.id), out_shape, value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.id].value.len() || shape.is_empty() || shape.len() > 2 {
            return dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.nodes[a.id].shape
            ));
        }
        let value = self.nodes[a.id].value.clone();
        let rg = self.rg(&[a.id]);
        Ok(self.push(Op::Reshape(a.id), shape.to_vec(), value, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.id].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.id].shape.clone();
        let rg = self.rg(&[a.id]);
        self.push(op, shape, value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x < 0.0 { 0.0 } else { x }, Op::Relu(a.id))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.id))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a.id))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a.id))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.id))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.id))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.id))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.id))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, f64::recip, Op::Recip(a.id))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.id].value.iter().sum();
        let rg = self.rg(&[a.id]);
        self.push(Op::Sum(a.id), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.id].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a.id]);
        self.push(Op::Mean(a.id), vec![1], vec![s], rg)
    }

    /// `Σ_i ½[log 2π + ℓ_i + (t_i − p_i)² e^{−ℓ_i}]` with log-variance `ℓ`
    /// either a scalar or matching `pred`.
    pub fn gaussian_nll(&mut self, pred: Var, logvar: Var, target: &[f64]) -> Result<Var> {
        let n = self.nodes[pred.id].value.len();
        if target.len() != n {
            return dim_err(format!("gaussian_nll: {} targets for {n} predictions", target.len()));
        }
        let lv = &self.nodes[logvar.id].value;
        if lv.len() != 1 && lv.len() != n {
            return dim_err("gaussian_nll: log-variance must be scalar or match predictions");
        }
        let p = &self.nodes[pred.id].value;
        let mut total = 0.0;
        for i in 0..n {
            let l = if lv.len() == 1 { lv[0] } else { lv[i] };
            let r = target[i] - p[i];
            total += 0.5 * (LN_2PI + l + r * r * (-l).exp());
        }
        let rg = self.rg(&[pred.id, logvar.id]);
        Ok(self.push(
            Op::GaussianNll { pred: pred.id, logvar: logvar.id, target: target.to_vec() },
            vec![1],
            vec![total],
            rg,
        ))
    }

    /// Summed negative log softmax probability of `labels` under row-wise
    /// `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.nodes[logits.id].shape.clone();
        if shape.len() != 2 || shape[0] != labels.len() {
            return dim_err(format!(
                "softmax_cross_entropy: logits {shape:?} for {} labels",
                labels.len()
            ));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return dim_err(format!("label {bad} out of {c} classes"));
        }
        let v = &self.nodes[logits.id].value;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                let row = &v[r * c..(r + 1) * c];
                log_sum_exp(row) - row[l]
            })
            .sum();
        let rg = self.rg(&[logits.id]);
        Ok(self.push(
            Op::SoftmaxCe { logits: logits.id, labels: labels.to_vec() },
            vec![1],
            vec![total],
            rg,
        ))
    }

    /// String-tagged entry point. Tags follow the primitive names used in
    /// configuration and logs (`add`, `elementwise-mul`, `fwht`, ...).
    pub fn record(&mut self, tag: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Contract(format!("`{tag}` takes {n} inputs, got {}", inputs.len())))
            }
        };
        let need = |o: Option<usize>, what: &str| -> Result<usize> {
            o.ok_or_else(|| Error::Contract(format!("`{tag}` needs attribute `{what}`")))
        };
        match tag {
            "add" => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            "sub" => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            "elementwise-mul" | "mul" => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            "scalar-mul" => {
                arity(1)?;
                let c = attrs
                    .scalar
                    .ok_or_else(|| Error::Contract("`scalar-mul` needs attribute `scalar`".into()))?;
                Ok(self.scale(inputs[0], c))
            }
            "matmul" => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1], attrs.transpose_b)),
            "diag-scale" => arity(2).and_then(|_| self.diag_scale(inputs[0], inputs[1])),
            "fwht" => arity(1).and_then(|_| self.fwht(inputs[0], attrs.block, attrs.normalized)),
            "concat" => self.concat(inputs),
            "slice" => {
                arity(1)?;
                let len = need(attrs.len, "len")?;
                self.slice(inputs[0], attrs.start, len)
            }
            "pad" => {
                arity(1)?;
                let to = need(attrs.len, "len")?;
                self.pad(inputs[0], to)
            }
            "reshape" => {
                arity(1)?;
                let shape = attrs
                    .shape
                    .clone()
                    .ok_or_else(|| Error::Contract("`reshape` needs attribute `shape`".into()))?;
                self.reshape(inputs[0], &shape)
            }
            "relu" => arity(1).map(|_| self.relu(inputs[0])),
            "tanh" => arity(1).map(|_| self.tanh(inputs[0])),
            "cos" => arity(1).map(|_| self.cos(inputs[0])),
            "sin" => arity(1).map(|_| self.sin(inputs[0])),
            "exp" => arity(1).map(|_| self.exp(inputs[0])),
            "log" => arity(1).map(|_| self.log(inputs[0])),
            "softplus" => arity(1).map(|_| self.softplus(inputs[0])),
            "sqrt" => arity(1).map(|_| self.sqrt(inputs[0])),
            "recip" => arity(1).map(|_| self.recip(inputs[0])),
            "sum" => arity(1).map(|_| self.sum(inputs[0])),
            "mean" => arity(1).map(|_| self.mean(inputs[0])),
            "gaussian-nll" => {
                arity(2)?;
                let t = attrs
                    .target
                    .as_deref()
                    .ok_or_else(|| Error::Contract("`gaussian-nll` needs `target`".into()))?;
                self.gaussian_nll(inputs[0], inputs[1], t)
            }
            "softmax-cross-entropy" => {
                arity(1)?;
                let l = attrs
                    .labels
                    .as_deref()
                    .ok_or_else(|| Error::Contract("`softmax-cross-entropy` needs `labels`".into()))?;
                self.softmax_cross_entropy(inputs[0], l)
            }
            other => Err(Error::UnsupportedOp(other.to_string())),
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients start from zero on every
    /// call, so repeated calls return identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| reduce_into(gb, g, *bc, |_, y| sign * y));
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len();
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        let y = match bc {
                            Bcast::Same => vb[i],
                            Bcast::Scalar => vb[0],
                            Bcast::Row => vb[i % nb],
                        };
                        *x += g[i] * y;
                    }
                });
                acc(*b, &mut |gb| reduce_into(gb, g, *bc, |i, y| y * va[i]));
            }
            Op::ScalarMul(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::MatMul { a, b, transpose_b } => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let (m, k) = (sa[0], sa[1]);
                let n = node.shape[1];
                let (va, vb) = (val(*a), val(*b));
                // dA = G·Bᵀ (or G·B when B was transposed)
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                let bv = if *transpose_b { vb[j * k + p] } else { vb[p * n + j] };
                                s += g[i * n + j] * bv;
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                let _ = sb;
                // dB = Aᵀ·G (or Gᵀ·A)
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = va[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                if *transpose_b {
                                    gb[j * k + p] += g[i * n + j] * x;
                                } else {
                                    gb[p * n + j] += x * g[i * n + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::DiagScale(a, d) => {
                let (va, vd) = (val(*a), val(*d));
                let n = vd.len();
                acc(*a, &mut |ga| {
                    ga.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * vd[i % n])
                });
                acc(*d, &mut |gd| {
                    for (i, y) in g.iter().enumerate() {
                        gd[i % n] += y * va[i];
                    }
                });
            }
            Op::Fwht { a, block, normalized } => {
                // H is symmetric, so the adjoint is the same transform.
                let mut back = g.to_vec();
                transform::fwht_batch_inplace(&mut back, *block, *normalized)
                    .expect("validated on the forward pass");
                acc(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::Concat(ids) => {
                let total = last_dim(&node.shape);
                let rows = node.value.len() / total;
                let mut offset = 0;
                for &p in ids {
                    let w = last_dim(&self.nodes[p].shape);
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { a, start } => {
                let w = last_dim(&self.nodes[*a].shape);
                let len = last_dim(&node.shape);
                let rows = node.value.len() / len;
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        for c in 0..len {
                            ga[r * w + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::Pad(a) => {
                let w = last_dim(&self.nodes[*a].shape);
                let to = last_dim(&node.shape);
                let rows = node.value.len() / to;
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        for c in 0..w {
                            ga[r * w + c] += g[r * to + c];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    ga.iter_mut().enumerate().for_each(|(i, x)| {
                        if va[i] > 0.0 {
                            *x += g[i]
                        }
                    })
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    ga.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * (1.0 - y[i] * y[i]))
                });
            }
            Op::Cos(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    ga.iter_mut().enumerate().for_each(|(i, x)| *x -= g[i] * va[i].sin())
                });
            }
            Op::Sin(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    ga.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * va[i].cos())
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| ga.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * y[i]));
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| ga.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] / va[i]));
            }
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    ga.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * sigmoid(va[i]))
                });
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    ga.iter_mut().enumerate().for_each(|(i, x)| {
                        if y[i] > 0.0 {
                            *x += g[i] * 0.5 / y[i]
                        }
                    })
                });
            }
            Op::Recip(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    ga.iter_mut().enumerate().for_each(|(i, x)| *x -= g[i] * y[i] * y[i])
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::GaussianNll { pred, logvar, target } => {
                let (p, lv) = (val(*pred), val(*logvar));
                let lv_at = |i: usize| if lv.len() == 1 { lv[0] } else { lv[i] };
                acc(*pred, &mut |gp| {
                    for i in 0..gp.len() {
                        gp[i] -= g[0] * (target[i] - p[i]) * (-lv_at(i)).exp();
                    }
                });
                acc(*logvar, &mut |gl| {
                    for i in 0..p.len() {
                        let r = target[i] - p[i];
                        let d = 0.5 * (1.0 - r * r * (-lv_at(i)).exp());
                        if gl.len() == 1 {
                            gl[0] += g[0] * d;
                        } else {
                            gl[i] += g[0] * d;
                        }
                    }
                });
            }
            Op::SoftmaxCe { logits, labels } => {
                let v = val(*logits);
                let c = self.nodes[*logits].shape[1];
                acc(*logits, &mut |gl| {
                    for (r, &l) in labels.iter().enumerate() {
                        let row = &v[r * c..(r + 1) * c];
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[0] * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn reduce_into(gb: &mut [f64], g: &[f64], bc: Bcast, f: impl Fn(usize, f64) -> f64) {
    match bc {
        Bcast::Same => gb.iter_mut().enumerate().for_each(|(i, x)| *x += f(i, g[i])),
        Bcast::Scalar => gb[0] += g.iter().enumerate().map(|(i, &y)| f(i, y)).sum::<f64>(),
        Bcast::Row => {
            let n = gb.len();
            for (i, &y) in g.iter().enumerate() {
                gb[i % n] += f(i, y);
            }
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Compares [`Tape::backward`] against central differences
/// `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`.
///
/// `f` receives a fresh tape and the input leaf and must return a scalar.
/// The returned error is `‖g_ad − g_fd‖_∞ / max(‖g_ad‖_∞, ‖g_fd‖_∞)`, i.e.
/// relative to the largest gradient entry.
pub fn finite_diff_check<F>(f: F, x: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("step {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |point: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param_vec(point);
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if y.len() != 1 {
            return Err(Error::Contract("finite_diff_check needs a scalar function".into()));
        }
        if !y[0].is_finite() {
            return Err(Error::Numeric(format!("non-finite value {} at probe point", y[0])));
        }
        Ok(y[0])
    };
    let mut tape = Tape::new();
    let v = tape.param_vec(x);
    let out = f(&mut tape, v)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::Numeric("non-finite value at base point".into()));
    }
    let analytic = tape.backward(out)?.wrt(v, x.len());

    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = eval(&probe)?;
        probe[i] = x[i] - eps;
        let down = eval(&probe)?;
        probe[i] = x[i];
        numeric.push((up - down) / (2.0 * eps));
    }
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf(&analytic).max(inf(&numeric));
    if scale == 0.0 {
        return Ok(0.0);
    }
    let diff = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(diff / scale)
}
