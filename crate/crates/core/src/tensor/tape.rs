//! Wengert tape for reverse-mode differentiation.
//!
//! Every operation appends one [`TensorNode`] holding its value and a record
//! of its inputs. Nodes are created in topological order, so backward is a
//! single reverse sweep over the tape.

use rand::Rng;

use super::Scalar;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulConst(Var, Vec<F>),
    ScaleRows(Var, Var),
    AddOuter(Var, Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    LeakyRelu(Var, F),
    Gelu(Var),
    Sigmoid(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
}

/// One value on the tape, with its gradient slot and producing operation.
#[derive(Debug, Clone)]
pub struct TensorNode<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    pub(crate) op: Op<F>,
}

impl<F: Scalar> TensorNode<F> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[F] {
        &self.value
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<TensorNode<F>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(rows, cols)` view of a rank-1 or rank-2 shape.
fn as_matrix(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((1, n)),
        [r, c] => Ok((r, c)),
        _ => Err(Error::Dimension(format!(
            "expected a rank-1 or rank-2 tensor, got shape {shape:?}"
        ))),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TensorNode<F> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(TensorNode {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<F>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    /// Differentiable leaf (a parameter).
    pub fn variable(&mut self, shape: &[usize], value: Vec<F>) -> Result<Var> {
        self.leaf(shape, value, true)
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<F>, requires_grad: bool) -> Result<Var> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != value.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a))?;
        let (k2, n) = as_matrix(self.shape(b))?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {m}x{k} * {k2}x{n}"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            F::zero(),
            &mut out,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x))?;
        let v = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// `x[r×c] + bias[c]`, the bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = as_matrix(self.shape(x))?;
        if numel(self.shape(bias)) != c {
            return Err(Error::Dimension(format!(
                "bias of {} values cannot broadcast over {c} columns",
                numel(self.shape(bias))
            )));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor), rg)
    }

    /// Element-wise product with a constant array of the same shape.
    pub fn mul_const(&mut self, x: Var, factors: Vec<F>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "constant factor length {} does not match {}",
                factors.len(),
                self.value(x).len()
            )));
        }
        let out = self
            .value(x)
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| v * f)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst(x, factors), rg))
    }

    /// Multiplies row `i` of `x[r×c]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x))?;
        if numel(self.shape(s)) != r {
            return Err(Error::Dimension(format!(
                "row scale of {} values for {r} rows",
                numel(self.shape(s))
            )));
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / c])
            .collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(vec![r, c], out, Op::ScaleRows(x, s), rg))
    }

    /// `out[i][j] = col[i] + row[j]`.
    pub fn add_outer(&mut self, col: Var, row: Var) -> Result<Var> {
        let r = numel(self.shape(col));
        let c = numel(self.shape(row));
        let cv = self.value(col);
        let rv = self.value(row);
        let mut out = Vec::with_capacity(r * c);
        for &a in cv {
            out.extend(rv.iter().map(|&b| a + b));
        }
        let rg = self.rg(col) || self.rg(row);
        Ok(self.push(vec![r, c], out, Op::AddOuter(col, row), rg))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = F::neg_infinity();
                for t in 0..len {
                    max = max.max(xv[base + t * inner]);
                }
                let mut sum = F::zero();
                for t in 0..len {
                    let e = (xv[base + t * inner] - max).exp();
                    out[base + t * inner] = e;
                    sum += e;
                }
                for t in 0..len {
                    out[base + t * inner] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Row-wise softmax of `x[r×c]` restricted to entries where `mask` is set;
    /// masked-out entries are exactly zero. Every row must keep one entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x))?;
        if mask.len() != r * c {
            return Err(Error::Dimension(format!(
                "mask of {} entries for a {r}x{c} matrix",
                mask.len()
            )));
        }
        let xv = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = i * c..(i + 1) * c;
            let mut max = F::neg_infinity();
            for j in row.clone() {
                if mask[j] {
                    max = max.max(xv[j]);
                }
            }
            if max == F::neg_infinity() {
                return Err(Error::Input(format!("masked softmax row {i} is empty")));
            }
            let mut sum = F::zero();
            for j in row.clone() {
                if mask[j] {
                    let e = (xv[j] - max).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            for j in row {
                out[j] /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, Op::MaskedSoftmax(x), rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("layer_norm on scalar".into()))?;
        if numel(self.shape(gain)) != d || numel(self.shape(bias)) != d {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must have {d} values"
            )));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = xv.len() / d;
        let dn = F::lit(d as f64);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let s = &xv[r * d..(r + 1) * d];
            let mean = s.iter().copied().sum::<F>() / dn;
            let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (s[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > F::zero() { v } else { slope * v })
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::LeakyRelu(x, slope), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Input(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - rate));
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = as_matrix(self.shape(logits))?;
        if labels.len() != b {
            return Err(Error::Input(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); b * c];
        let mut total = F::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[label];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / F::lit(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let (_, c) = as_matrix(self.shape(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = as_matrix(self.shape(p))?;
            if pc != c {
                return Err(Error::Dimension(format!(
                    "concat_rows: column counts {c} and {pc} differ"
                )));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let (r, _) = as_matrix(self.shape(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = as_matrix(self.shape(p))?;
            if pr != r {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {r} and {pr} differ"
                )));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, c], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x))?;
        if len == 0 || start + len > r {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x))?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Column means of `x[r×c]`, shape `[1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.shape(x))?;
        let v = self.value(x);
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += v[i * c + j];
            }
        }
        let inv = F::one() / F::lit(r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(vec![1, c], out, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Reverse sweep from the scalar `loss`. Clears any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backprop(before, node, &g);
            node.grad = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * x * x)
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` for constants.
fn slot<F: Scalar>(nodes: &mut [TensorNode<F>], v: Var) -> Option<&mut Vec<F>> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.grad.get_or_insert_with(|| vec![F::zero(); len]))
}

/// Gradient buffer of `target` together with the value of `other`.
fn grad_with<'a, F: Scalar>(
    nodes: &'a mut [TensorNode<F>],
    target: Var,
    other: Var,
) -> Option<(&'a mut Vec<F>, &'a [F])> {
    if !nodes[target.0].requires_grad {
        return None;
    }
    let (t, o) = match target.0.cmp(&other.0) {
        std::cmp::Ordering::Equal => {
            let TensorNode { value, grad, .. } = &mut nodes[target.0];
            let len = value.len();
            return Some((grad.get_or_insert_with(|| vec![F::zero(); len]), value));
        }
        std::cmp::Ordering::Less => {
            let (l, r) = nodes.split_at_mut(other.0);
            (&mut l[target.0], &r[0])
        }
        std::cmp::Ordering::Greater => {
            let (l, r) = nodes.split_at_mut(target.0);
            (&mut r[0], &l[other.0])
        }
    };
    let len = t.value.len();
    Some((t.grad.get_or_insert_with(|| vec![F::zero(); len]), &o.value))
}

fn acc<F: Scalar>(nodes: &mut [TensorNode<F>], v: Var, g: &[F]) {
    if let Some(s) = slot(nodes, v) {
        s.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }
}

fn backprop<F: Scalar>(nodes: &mut [TensorNode<F>], node: &TensorNode<F>, g: &[F]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = as_matrix(&nodes[a.0].shape).expect("checked in forward");
            let n = node.shape[1];
            if let Some((da, bv)) = grad_with(nodes, *a, *b) {
                // dA = dC · Bᵀ
                F::gemm(m, n, k, F::one(), g, (n, 1), bv, (1, n), F::one(), da, k);
            }
            if let Some((db, av)) = grad_with(nodes, *b, *a) {
                // dB = Aᵀ · dC
                F::gemm(k, m, n, F::one(), av, (1, k), g, (n, 1), F::one(), db, n);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (node.shape[1], node.shape[0]);
            if let Some(dx) = slot(nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            acc(nodes, *a, g);
            acc(nodes, *b, g);
        }
        Op::AddRow(x, bias) => {
            acc(nodes, *x, g);
            let c = *node.shape.last().expect("matrix");
            if let Some(db) = slot(nodes, *bias) {
                for (i, &gi) in g.iter().enumerate() {
                    db[i % c] += gi;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some((da, bv)) = grad_with(nodes, *a, *b) {
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
            }
            if let Some((db, av)) = grad_with(nodes, *b, *a) {
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(dx) = slot(nodes, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *f);
            }
        }
        Op::MulConst(x, factors) => {
            if let Some(dx) = slot(nodes, *x) {
                for i in 0..g.len() {
                    dx[i] += g[i] * factors[i];
                }
            }
        }
        Op::ScaleRows(x, s) => {
            let c = node.shape[1];
            if let Some((dx, sv)) = grad_with(nodes, *x, *s) {
                for i in 0..g.len() {
                    dx[i] += g[i] * sv[i / c];
                }
            }
            if let Some((ds, xv)) = grad_with(nodes, *s, *x) {
                for i in 0..g.len() {
                    ds[i / c] += g[i] * xv[i];
                }
            }
        }
        Op::AddOuter(col, row) => {
            let (r, c) = (node.shape[0], node.shape[1]);
            if let Some(dc) = slot(nodes, *col) {
                for i in 0..r {
                    dc[i] += g[i * c..(i + 1) * c].iter().copied().sum::<F>();
                }
            }
            if let Some(dr) = slot(nodes, *row) {
                for i in 0..r {
                    for j in 0..c {
                        dr[j] += g[i * c + j];
                    }
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            if let Some(dx) = slot(nodes, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot: F = (0..*len)
                            .map(|t| g[base + t * inner] * y[base + t * inner])
                            .sum();
                        for t in 0..*len {
                            let idx = base + t * inner;
                            dx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax(x) => {
            let c = node.shape[1];
            if let Some(dx) = slot(nodes, *x) {
                for row in 0..node.shape[0] {
                    let r = row * c..(row + 1) * c;
                    let dot: F = r.clone().map(|j| g[j] * y[j]).sum();
                    for j in r {
                        dx[j] += y[j] * (g[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = *node.shape.last().expect("non-scalar");
            let rows = g.len() / d;
            let gv = nodes[gain.0].value.clone();
            if let Some(db) = slot(nodes, *bias) {
                for (i, &gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
            }
            if let Some(dg) = slot(nodes, *gain) {
                for (i, &gi) in g.iter().enumerate() {
                    dg[i % d] += gi * xhat[i];
                }
            }
            if let Some(dx) = slot(nodes, *x) {
                let dn = F::lit(d as f64);
                for r in 0..rows {
                    let s = r * d;
                    let mut sum_dh = F::zero();
                    let mut sum_dh_h = F::zero();
                    for j in 0..d {
                        let dh = g[s + j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[s + j];
                    }
                    for j in 0..d {
                        let dh = g[s + j] * gv[j];
                        dx[s + j] += rstd[r] / dn * (dn * dh - sum_dh - xhat[s + j] * sum_dh_h);
                    }
                }
            }
        }
        Op::LeakyRelu(x, slope) => {
            if let Some((dx, xv)) = grad_with(nodes, *x, *x) {
                for i in 0..g.len() {
                    dx[i] += if xv[i] > F::zero() { g[i] } else { g[i] * *slope };
                }
            }
        }
        Op::Gelu(x) => {
            if let Some((dx, xv)) = grad_with(nodes, *x, *x) {
                for i in 0..g.len() {
                    dx[i] += g[i] * gelu_grad(xv[i]);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = slot(nodes, *x) {
                for i in 0..g.len() {
                    dx[i] += g[i] * y[i] * (F::one() - y[i]);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let b = labels.len();
            let c = probs.len() / b;
            let scale = g[0] / F::lit(b as f64);
            if let Some(dl) = slot(nodes, *logits) {
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { F::one() } else { F::zero() };
                        dl[i * c + j] += (probs[i * c + j] - onehot) * scale;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p.0].value.len();
                acc(nodes, p, &g[off..off + len]);
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let r = node.shape[0];
            let c = node.shape[1];
            let mut col = 0;
            for &p in parts {
                let w = nodes[p.0].shape.last().copied().unwrap_or(1);
                if let Some(dp) = slot(nodes, p) {
                    for i in 0..r {
                        for j in 0..w {
                            dp[i * w + j] += g[i * c + col + j];
                        }
                    }
                }
                col += w;
            }
        }
        Op::SliceRows { x, start } => {
            let c = node.shape[1];
            if let Some(dx) = slot(nodes, *x) {
                for (i, &gi) in g.iter().enumerate() {
                    dx[start * c + i] += gi;
                }
            }
        }
        Op::SliceCols { x, start } => {
            let (r, len) = (node.shape[0], node.shape[1]);
            let c = nodes[x.0].shape.last().copied().unwrap_or(1);
            if let Some(dx) = slot(nodes, *x) {
                for i in 0..r {
                    for j in 0..len {
                        dx[i * c + start + j] += g[i * len + j];
                    }
                }
            }
        }
        Op::Reshape(x) => acc(nodes, *x, g),
        Op::MeanRows(x) => {
            let c = node.shape[1];
            let r = nodes[x.0].value.len() / c;
            let inv = F::one() / F::lit(r as f64);
            if let Some(dx) = slot(nodes, *x) {
                for (i, d) in dx.iter_mut().enumerate() {
                    *d += g[i % c] * inv;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}
