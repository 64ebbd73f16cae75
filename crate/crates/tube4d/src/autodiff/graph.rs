//! Reverse-mode tape. Every operation appends a node holding its result value
//! and parent references; `backward` walks the tape once in reverse creation
//! order (consumers strictly after producers, so each node is finished before
//! its parents are touched) and deposits gradients on `requires_grad` leaves.
//!
//! Semantics are deliberately strict: no broadcasting (shape changes are
//! explicit `reshape`/`repeat_axis`), every op validates operand shapes, and
//! every produced value is scanned for NaN/Inf so numeric trouble surfaces at
//! the op that caused it.

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::real::Real;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Cheap to copy; only meaningful together
/// with the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

/// Epsilon guarding row norms in `cosine_rows` / `normalize_rows`.
pub const NORM_EPS: f64 = 1e-8;
/// Epsilon inside the layernorm variance square root.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Matmul(usize, usize),
    Softmax(usize),
    LayerNorm(usize),
    Gelu(usize),
    Relu(usize),
    MaxPoolAxis(usize, usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Reshape(usize),
    Transpose(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    GatherRows(usize, Vec<usize>),
    RepeatAxis(usize, usize, usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    CosineRows(usize, usize),
    NormalizeRows(usize),
    /// Cached argmin of the second operand per row of the first.
    NearestSqDist(usize, usize, Vec<usize>),
}

#[derive(Debug)]
struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    /// Populated only on leaves, only by `backward`, and accumulated across
    /// repeated backward calls.
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Reverse-mode computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// outer × len × inner decomposition for a reduction along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- construction ------------------------------------------------------

    /// Insert a leaf. `requires_grad` leaves are the only nodes that receive
    /// gradients from `backward`.
    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("shape {shape:?} does not cover {} values", data.len()),
            });
        }
        self.push("leaf", shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    /// Shape-`[1]` constant.
    pub fn scalar(&mut self, v: T) -> Result<Tensor> {
        self.constant(vec![v], &[1])
    }

    /// Value-identical tensor detached from the tape: backward deposits
    /// nothing upstream of it.
    pub fn stop_gradient(&mut self, t: Tensor) -> Result<Tensor> {
        let value = self.nodes[t.0].value.clone();
        let shape = self.nodes[t.0].shape.clone();
        self.push("stop_gradient", shape, value, false, Op::Leaf)
    }

    // ---- accessors ---------------------------------------------------------

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tensor) -> &[T] {
        &self.nodes[t.0].value
    }

    /// Gradient accumulated on a leaf, if backward has reached it.
    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Value of a shape-`[1]` tensor.
    pub fn item(&self, t: Tensor) -> Result<T> {
        if self.nodes[t.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.nodes[t.0].shape
            )));
        }
        Ok(self.nodes[t.0].value[0])
    }

    fn push(
        &mut self,
        opname: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), value.len(), "{opname}: shape/value mismatch");
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", shape, value, rg, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", shape, value, rg, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", shape, value, rg, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("div", a, b)?;
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push("div", shape, value, rg, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, a: Tensor) -> Result<Tensor> {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| -x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("neg", shape, value, rg, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Tensor, c: T) -> Result<Tensor> {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("scale", shape, value, rg, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: T) -> Result<Tensor> {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("add_scalar", shape, value, rg, Op::AddScalar(a.0, c))
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("exp", shape, value, rg, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Tensor) -> Result<Tensor> {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("ln", shape, value, rg, Op::Ln(a.0))
    }

    pub fn sqrt(&mut self, a: Tensor) -> Result<Tensor> {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x.sqrt()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("sqrt", shape, value, rg, Op::Sqrt(a.0))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x.maximum(T::ZERO))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("relu", shape, value, rg, Op::Relu(a.0))
    }

    /// tanh-form GELU.
    pub fn gelu(&mut self, a: Tensor) -> Result<Tensor> {
        let value: Vec<T> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| gelu_fwd(x))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("gelu", shape, value, rg, Op::Gelu(a.0))
    }

    // ---- matmul ------------------------------------------------------------

    /// `[m,k]·[k,n] → [m,n]`, or batched `[b,m,k]·[b,k,n] → [b,m,n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    detail: format!("{sa:?} × {sb:?}"),
                })
            }
        };
        let mut value = vec![T::ZERO; batch * m * n];
        for bi in 0..batch {
            mm_nn(
                &self.nodes[a.0].value[bi * m * k..(bi + 1) * m * k],
                &self.nodes[b.0].value[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut value[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", shape, value, rg, Op::Matmul(a.0, b.0))
    }

    // ---- normalization & attention pieces -----------------------------------

    /// Softmax over the last axis, max-subtracted per slice.
    pub fn softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        let last = *shape.last().ok_or(Error::Shape {
            op: "softmax",
            detail: "rank 0".into(),
        })?;
        let mut value = self.nodes[a.0].value.clone();
        for row in value.chunks_mut(last) {
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maximum(v);
            }
            let mut sum = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(a);
        self.push("softmax", shape, value, rg, Op::Softmax(a.0))
    }

    /// Normalize the last axis to zero mean / unit variance (no affine part;
    /// compose with `mul`/`add` for learnable gain and bias).
    pub fn layernorm(&mut self, a: Tensor) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        let last = *shape.last().ok_or(Error::Shape {
            op: "layernorm",
            detail: "rank 0".into(),
        })?;
        let eps = T::from_f64(LAYERNORM_EPS);
        let inv_n = T::from_f64(1.0 / last as f64);
        let mut value = self.nodes[a.0].value.clone();
        for row in value.chunks_mut(last) {
            let mut mean = T::ZERO;
            for &v in row.iter() {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::ZERO;
            for &v in row.iter() {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_sigma = T::ONE / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv_sigma;
            }
        }
        let rg = self.rg(a);
        self.push("layernorm", shape, value, rg, Op::LayerNorm(a.0))
    }

    /// L2-normalize each row of a `[r,d]` tensor; rows with norm below
    /// `NORM_EPS` are divided by `NORM_EPS` instead.
    pub fn normalize_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "normalize_rows",
                detail: format!("{shape:?}, want rank 2"),
            });
        }
        let d = shape[1];
        let eps = T::from_f64(NORM_EPS);
        let mut value = self.nodes[a.0].value.clone();
        for row in value.chunks_mut(d) {
            let mut sq = T::ZERO;
            for &v in row.iter() {
                sq += v * v;
            }
            let clamped = sq.sqrt().maximum(eps);
            for v in row.iter_mut() {
                *v /= clamped;
            }
        }
        let rg = self.rg(a);
        self.push("normalize_rows", shape, value, rg, Op::NormalizeRows(a.0))
    }

    /// Row-wise cosine similarity of two `[r,d]` tensors → `[r]`, with norms
    /// clamped at `NORM_EPS`.
    pub fn cosine_rows(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("cosine_rows", a, b)?;
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "cosine_rows",
                detail: format!("{shape:?}, want rank 2"),
            });
        }
        let (r, d) = (shape[0], shape[1]);
        let eps = T::from_f64(NORM_EPS);
        let mut value = Vec::with_capacity(r);
        for i in 0..r {
            let ra = &self.nodes[a.0].value[i * d..(i + 1) * d];
            let rb = &self.nodes[b.0].value[i * d..(i + 1) * d];
            let (mut dot, mut na, mut nb) = (T::ZERO, T::ZERO, T::ZERO);
            for (&x, &y) in ra.iter().zip(rb) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            value.push(dot / (na.sqrt().maximum(eps) * nb.sqrt().maximum(eps)));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("cosine_rows", vec![r], value, rg, Op::CosineRows(a.0, b.0))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let mut acc = T::ZERO;
        for &v in &self.nodes[a.0].value {
            acc += v;
        }
        let rg = self.rg(a);
        self.push("sum", vec![1], vec![acc], rg, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let n = self.nodes[a.0].value.len();
        let mut acc = T::ZERO;
        for &v in &self.nodes[a.0].value {
            acc += v;
        }
        acc *= T::from_f64(1.0 / n as f64);
        let rg = self.rg(a);
        self.push("mean", vec![1], vec![acc], rg, Op::Mean(a.0))
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || shape.len() == 1 {
            return Err(Error::Shape {
                op: "sum_axis",
                detail: format!("axis {axis} of {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut value = vec![T::ZERO; outer * inner];
        let src = &self.nodes[a.0].value;
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut value[o * inner..(o + 1) * inner];
                for (dv, &sv) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *dv += sv;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push("sum_axis", out_shape, value, rg, Op::SumAxis(a.0, axis))
    }

    /// Max over one axis (axis removed). Gradient flows to the first maximum
    /// along the axis.
    pub fn maxpool_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || shape.len() == 1 {
            return Err(Error::Shape {
                op: "maxpool_axis",
                detail: format!("axis {axis} of {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].value;
        let mut value = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = src[o * len * inner + i];
                for l in 1..len {
                    let v = src[(o * len + l) * inner + i];
                    if v > best {
                        best = v;
                    }
                }
                value[o * inner + i] = best;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push(
            "maxpool_axis",
            out_shape,
            value,
            rg,
            Op::MaxPoolAxis(a.0, axis),
        )
    }

    // ---- shape ops ----------------------------------------------------------

    pub fn reshape(&mut self, a: Tensor, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.nodes[a.0].value.len() || new_shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} → {new_shape:?}", self.nodes[a.0].shape),
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.push("reshape", new_shape.to_vec(), value, rg, Op::Reshape(a.0))
    }

    /// Permute axes; `perm` must be a permutation of `0..rank`.
    pub fn transpose(&mut self, a: Tensor, perm: &[usize]) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("perm {perm:?} on rank {rank}"),
            });
        }
        let (value, out_shape) = permute_copy(&self.nodes[a.0].value, &shape, perm);
        let rg = self.rg(a);
        self.push(
            "transpose",
            out_shape,
            value,
            rg,
            Op::Transpose(a.0, perm.to_vec()),
        )
    }

    /// Concatenate along `axis`; shapes must agree on all other axes.
    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                detail: "no operands".into(),
            });
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {axis} of {first:?}"),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (&x, &y))| d != axis && x != y)
            {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{s:?} vs {first:?} along {axis}"),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut value = vec![T::ZERO; numel(&out_shape)];
        let mut offset = 0;
        for &p in parts {
            let plen = self.nodes[p.0].shape[axis];
            let src = &self.nodes[p.0].value;
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * plen * inner;
                value[dst_base..dst_base + plen * inner]
                    .copy_from_slice(&src[src_base..src_base + plen * inner]);
            }
            offset += plen;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let ids = parts.iter().map(|p| p.0).collect();
        self.push("concat", out_shape, value, rg, Op::Concat(ids, axis))
    }

    /// Select rows (axis 0) by index; duplicates allowed. Gradient scatters
    /// back additively.
    pub fn gather_rows(&mut self, a: Tensor, indices: &[usize]) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        let rows = shape[0];
        if indices.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: "empty index list".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("index {bad} out of {rows} rows"),
            });
        }
        let row = numel(&shape[1..]);
        let mut value = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            value.extend_from_slice(&self.nodes[a.0].value[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let rg = self.rg(a);
        self.push(
            "gather_rows",
            out_shape,
            value,
            rg,
            Op::GatherRows(a.0, indices.to_vec()),
        )
    }

    /// Repeat an axis of extent 1 to extent `n`.
    pub fn repeat_axis(&mut self, a: Tensor, axis: usize, n: usize) -> Result<Tensor> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || shape[axis] != 1 || n == 0 {
            return Err(Error::Shape {
                op: "repeat_axis",
                detail: format!("axis {axis} (extent must be 1) of {shape:?}, n={n}"),
            });
        }
        let (outer, _, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].value;
        let mut value = vec![T::ZERO; outer * n * inner];
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for rep in 0..n {
                value[(o * n + rep) * inner..(o * n + rep + 1) * inner].copy_from_slice(block);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = n;
        let rg = self.rg(a);
        self.push(
            "repeat_axis",
            out_shape,
            value,
            rg,
            Op::RepeatAxis(a.0, axis, n),
        )
    }

    // ---- point-set distance --------------------------------------------------

    /// For each row of `x [m,d]`, the squared distance to its nearest row of
    /// `y [n,d]` → `[m]`. Ties resolve to the lowest index. Gradients flow to
    /// both operands through the minimizing pair.
    pub fn nearest_sqdist(&mut self, x: Tensor, y: Tensor) -> Result<Tensor> {
        let (sx, sy) = (&self.nodes[x.0].shape, &self.nodes[y.0].shape);
        if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
            return Err(Error::Shape {
                op: "nearest_sqdist",
                detail: format!("{sx:?} vs {sy:?}"),
            });
        }
        let (m, d, n) = (sx[0], sx[1], sy[0]);
        let xs = &self.nodes[x.0].value;
        let ys = &self.nodes[y.0].value;
        let mut value = Vec::with_capacity(m);
        let mut nearest = Vec::with_capacity(m);
        for i in 0..m {
            let xi = &xs[i * d..(i + 1) * d];
            let (mut best, mut best_j) = (None::<T>, 0usize);
            for j in 0..n {
                let yj = &ys[j * d..(j + 1) * d];
                let mut sq = T::ZERO;
                for (&a, &b) in xi.iter().zip(yj) {
                    let dd = a - b;
                    sq += dd * dd;
                }
                if best.map_or(true, |b| sq < b) {
                    best = Some(sq);
                    best_j = j;
                }
            }
            value.push(best.expect("n >= 1 by shape validation"));
            nearest.push(best_j);
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(
            "nearest_sqdist",
            vec![m],
            value,
            rg,
            Op::NearestSqDist(x.0, y.0, nearest),
        )
    }

    // ---- composites ----------------------------------------------------------

    /// `x [r,in] · w [in,out] + b [out]` with the bias explicitly broadcast.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let xw = self.matmul(x, w)?;
        let rows = self.nodes[xw.0].shape[0];
        let cols = self.nodes[xw.0].shape[1];
        let b_row = self.reshape(b, &[1, cols])?;
        let b_full = self.repeat_axis(b_row, 0, rows)?;
        self.add(xw, b_full)
    }

    // ---- backward --------------------------------------------------------------

    /// Reverse pass from a scalar loss. Flowing gradients live in a scratch
    /// buffer; only `requires_grad` leaves accumulate into their `grad` slot,
    /// so calling backward twice adds the two gradients.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward on non-scalar loss of shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut flow: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        flow[loss.0] = Some(vec![T::ONE]);

        for id in (0..=loss.0).rev() {
            let g = match flow[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            // Split borrows: op metadata cloned, parent values read by index.
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {
                    let slot = self.nodes[id]
                        .grad
                        .get_or_insert_with(|| vec![T::ZERO; g.len()]);
                    for (s, &gv) in slot.iter_mut().zip(&g) {
                        *s += gv;
                    }
                }
                Op::Add(a, b) => {
                    self.flow_add(&mut flow, a, &g, |gv, _| gv);
                    self.flow_add(&mut flow, b, &g, |gv, _| gv);
                }
                Op::Sub(a, b) => {
                    self.flow_add(&mut flow, a, &g, |gv, _| gv);
                    self.flow_add(&mut flow, b, &g, |gv, _| -gv);
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[b].value.clone();
                    self.flow_add(&mut flow, a, &g, |gv, i| gv * bv[i]);
                    let av = self.nodes[a].value.clone();
                    self.flow_add(&mut flow, b, &g, |gv, i| gv * av[i]);
                }
                Op::Div(a, b) => {
                    let bv = self.nodes[b].value.clone();
                    self.flow_add(&mut flow, a, &g, |gv, i| gv / bv[i]);
                    let av = self.nodes[a].value.clone();
                    self.flow_add(&mut flow, b, &g, |gv, i| -gv * av[i] / (bv[i] * bv[i]));
                }
                Op::Neg(a) => self.flow_add(&mut flow, a, &g, |gv, _| -gv),
                Op::Scale(a, c) => self.flow_add(&mut flow, a, &g, |gv, _| gv * c),
                Op::AddScalar(a, _) => self.flow_add(&mut flow, a, &g, |gv, _| gv),
                Op::Exp(a) => {
                    let y = self.nodes[id].value.clone();
                    self.flow_add(&mut flow, a, &g, |gv, i| gv * y[i]);
                }
                Op::Ln(a) => {
                    let x = self.nodes[a].value.clone();
                    self.flow_add(&mut flow, a, &g, |gv, i| gv / x[i]);
                }
                Op::Sqrt(a) => {
                    let y = self.nodes[id].value.clone();
                    let half = T::from_f64(0.5);
                    self.flow_add(&mut flow, a, &g, |gv, i| gv * half / y[i]);
                }
                Op::Relu(a) => {
                    let x = self.nodes[a].value.clone();
                    self.flow_add(&mut flow, a, &g, |gv, i| {
                        if x[i] > T::ZERO {
                            gv
                        } else {
                            T::ZERO
                        }
                    });
                }
                Op::Gelu(a) => {
                    let x = self.nodes[a].value.clone();
                    self.flow_add(&mut flow, a, &g, |gv, i| gv * gelu_bwd(x[i]));
                }
                Op::Matmul(a, b) => self.backward_matmul(&mut flow, id, a, b, &g),
                Op::Softmax(a) => self.backward_softmax(&mut flow, id, a, &g),
                Op::LayerNorm(a) => self.backward_layernorm(&mut flow, id, a, &g),
                Op::MaxPoolAxis(a, axis) => self.backward_maxpool(&mut flow, a, axis, &g),
                Op::Sum(a) => {
                    let gv = g[0];
                    self.flow_add(&mut flow, a, &vec![gv; self.nodes[a].value.len()], |v, _| v);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a].value.len();
                    let gv = g[0] * T::from_f64(1.0 / n as f64);
                    self.flow_add(&mut flow, a, &vec![gv; n], |v, _| v);
                }
                Op::SumAxis(a, axis) => self.backward_sum_axis(&mut flow, a, axis, &g),
                Op::Reshape(a) => self.flow_add(&mut flow, a, &g, |gv, _| gv),
                Op::Transpose(a, perm) => {
                    let out_shape = self.nodes[id].shape.clone();
                    let mut inv = vec![0; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inv[p] = d;
                    }
                    let (gp, _) = permute_copy(&g, &out_shape, &inv);
                    self.flow_add(&mut flow, a, &gp, |gv, _| gv);
                }
                Op::Concat(parts, axis) => self.backward_concat(&mut flow, &parts, axis, &g),
                Op::GatherRows(a, indices) => {
                    let row = numel(&self.nodes[a].shape[1..]);
                    let mut ga = vec![T::ZERO; self.nodes[a].value.len()];
                    for (i, &src) in indices.iter().enumerate() {
                        for c in 0..row {
                            ga[src * row + c] += g[i * row + c];
                        }
                    }
                    self.flow_add(&mut flow, a, &ga, |gv, _| gv);
                }
                Op::RepeatAxis(a, axis, n) => {
                    let in_shape = self.nodes[a].shape.clone();
                    let (outer, _, inner) = axis_split(&in_shape, axis);
                    let mut ga = vec![T::ZERO; outer * inner];
                    for o in 0..outer {
                        for rep in 0..n {
                            let base = (o * n + rep) * inner;
                            for i in 0..inner {
                                ga[o * inner + i] += g[base + i];
                            }
                        }
                    }
                    self.flow_add(&mut flow, a, &ga, |gv, _| gv);
                }
                Op::CosineRows(a, b) => self.backward_cosine(&mut flow, id, a, b, &g),
                Op::NormalizeRows(a) => self.backward_normalize(&mut flow, a, &g),
                Op::NearestSqDist(x, y, nearest) => {
                    self.backward_nearest(&mut flow, x, y, &nearest, &g)
                }
            }
        }
        Ok(())
    }

    /// Accumulate `f(g[i], i)` into the scratch gradient of `parent`,
    /// allocating it on first touch. Skips parents that don't need grads.
    fn flow_add(
        &self,
        flow: &mut [Option<Vec<T>>],
        parent: usize,
        g: &[T],
        f: impl Fn(T, usize) -> T,
    ) {
        if !self.nodes[parent].requires_grad {
            return;
        }
        let slot =
            flow[parent].get_or_insert_with(|| vec![T::ZERO; self.nodes[parent].value.len()]);
        for (i, s) in slot.iter_mut().enumerate() {
            *s += f(g[i], i);
        }
    }

    fn backward_matmul(
        &self,
        flow: &mut [Option<Vec<T>>],
        _id: usize,
        a: usize,
        b: usize,
        g: &[T],
    ) {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        let (batch, m, k, n) = if sa.len() == 2 {
            (1, sa[0], sa[1], sb[1])
        } else {
            (sa[0], sa[1], sa[2], sb[2])
        };
        if self.nodes[a].requires_grad {
            let mut ga = vec![T::ZERO; batch * m * k];
            for bi in 0..batch {
                mm_nt(
                    &g[bi * m * n..(bi + 1) * m * n],
                    &self.nodes[b].value[bi * k * n..(bi + 1) * k * n],
                    m,
                    n,
                    k,
                    &mut ga[bi * m * k..(bi + 1) * m * k],
                );
            }
            self.flow_add(flow, a, &ga, |gv, _| gv);
        }
        if self.nodes[b].requires_grad {
            let mut gb = vec![T::ZERO; batch * k * n];
            for bi in 0..batch {
                mm_tn(
                    &self.nodes[a].value[bi * m * k..(bi + 1) * m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                    &mut gb[bi * k * n..(bi + 1) * k * n],
                );
            }
            self.flow_add(flow, b, &gb, |gv, _| gv);
        }
    }

    fn backward_softmax(&self, flow: &mut [Option<Vec<T>>], id: usize, a: usize, g: &[T]) {
        let y = &self.nodes[id].value;
        let last = *self.nodes[id].shape.last().unwrap();
        let mut ga = vec![T::ZERO; y.len()];
        for (row, (yrow, grow)) in y.chunks(last).zip(g.chunks(last)).enumerate() {
            let mut dot = T::ZERO;
            for (&yv, &gv) in yrow.iter().zip(grow) {
                dot += yv * gv;
            }
            for (i, s) in ga[row * last..(row + 1) * last].iter_mut().enumerate() {
                *s = yrow[i] * (grow[i] - dot);
            }
        }
        self.flow_add(flow, a, &ga, |gv, _| gv);
    }

    fn backward_layernorm(&self, flow: &mut [Option<Vec<T>>], id: usize, a: usize, g: &[T]) {
        let x = &self.nodes[a].value;
        let y = &self.nodes[id].value;
        let last = *self.nodes[id].shape.last().unwrap();
        let eps = T::from_f64(LAYERNORM_EPS);
        let inv_n = T::from_f64(1.0 / last as f64);
        let mut ga = vec![T::ZERO; x.len()];
        for row in 0..x.len() / last {
            let xr = &x[row * last..(row + 1) * last];
            let yr = &y[row * last..(row + 1) * last];
            let gr = &g[row * last..(row + 1) * last];
            let mut mean = T::ZERO;
            for &v in xr {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::ZERO;
            for &v in xr {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_sigma = T::ONE / (var + eps).sqrt();
            let (mut gmean, mut gydot) = (T::ZERO, T::ZERO);
            for (&gv, &yv) in gr.iter().zip(yr) {
                gmean += gv;
                gydot += gv * yv;
            }
            gmean *= inv_n;
            gydot *= inv_n;
            for (i, s) in ga[row * last..(row + 1) * last].iter_mut().enumerate() {
                *s = inv_sigma * (gr[i] - gmean - yr[i] * gydot);
            }
        }
        self.flow_add(flow, a, &ga, |gv, _| gv);
    }

    fn backward_maxpool(&self, flow: &mut [Option<Vec<T>>], a: usize, axis: usize, g: &[T]) {
        let shape = &self.nodes[a].shape;
        let (outer, len, inner) = axis_split(shape, axis);
        let src = &self.nodes[a].value;
        let mut ga = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                // First maximum receives the gradient (same scan order as forward).
                let (mut best, mut best_l) = (src[o * len * inner + i], 0usize);
                for l in 1..len {
                    let v = src[(o * len + l) * inner + i];
                    if v > best {
                        best = v;
                        best_l = l;
                    }
                }
                ga[(o * len + best_l) * inner + i] += g[o * inner + i];
            }
        }
        self.flow_add(flow, a, &ga, |gv, _| gv);
    }

    fn backward_sum_axis(&self, flow: &mut [Option<Vec<T>>], a: usize, axis: usize, g: &[T]) {
        let shape = &self.nodes[a].shape;
        let (outer, len, inner) = axis_split(shape, axis);
        let mut ga = vec![T::ZERO; self.nodes[a].value.len()];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    ga[base + i] = g[o * inner + i];
                }
            }
        }
        self.flow_add(flow, a, &ga, |gv, _| gv);
    }

    fn backward_concat(&self, flow: &mut [Option<Vec<T>>], parts: &[usize], axis: usize, g: &[T]) {
        let total: usize = parts.iter().map(|&p| self.nodes[p].shape[axis]).sum();
        let first = &self.nodes[parts[0]].shape;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut offset = 0;
        for &p in parts {
            let plen = self.nodes[p].shape[axis];
            if self.nodes[p].requires_grad {
                let mut gp = vec![T::ZERO; self.nodes[p].value.len()];
                for o in 0..outer {
                    let src_base = (o * total + offset) * inner;
                    let dst_base = o * plen * inner;
                    gp[dst_base..dst_base + plen * inner]
                        .copy_from_slice(&g[src_base..src_base + plen * inner]);
                }
                self.flow_add(flow, p, &gp, |gv, _| gv);
            }
            offset += plen;
        }
    }

    fn backward_cosine(&self, flow: &mut [Option<Vec<T>>], id: usize, a: usize, b: usize, g: &[T]) {
        let d = self.nodes[a].shape[1];
        let r = self.nodes[a].shape[0];
        let eps = T::from_f64(NORM_EPS);
        let y = &self.nodes[id].value;
        let mut ga = vec![T::ZERO; r * d];
        let mut gb = vec![T::ZERO; r * d];
        for i in 0..r {
            let ra = &self.nodes[a].value[i * d..(i + 1) * d];
            let rb = &self.nodes[b].value[i * d..(i + 1) * d];
            let (mut na2, mut nb2) = (T::ZERO, T::ZERO);
            for k in 0..d {
                na2 += ra[k] * ra[k];
                nb2 += rb[k] * rb[k];
            }
            let (na, nb) = (na2.sqrt(), nb2.sqrt());
            let (ca, cb) = (na.maximum(eps), nb.maximum(eps));
            let denom = ca * cb;
            for k in 0..d {
                let mut da = rb[k] / denom;
                let mut db = ra[k] / denom;
                // Norm terms vanish where the clamp is active (cᵃ constant there).
                if na > eps {
                    da -= y[i] * ra[k] / (ca * ca);
                }
                if nb > eps {
                    db -= y[i] * rb[k] / (cb * cb);
                }
                ga[i * d + k] = g[i] * da;
                gb[i * d + k] = g[i] * db;
            }
        }
        self.flow_add(flow, a, &ga, |gv, _| gv);
        self.flow_add(flow, b, &gb, |gv, _| gv);
    }

    fn backward_normalize(&self, flow: &mut [Option<Vec<T>>], a: usize, g: &[T]) {
        let d = self.nodes[a].shape[1];
        let r = self.nodes[a].shape[0];
        let eps = T::from_f64(NORM_EPS);
        let mut ga = vec![T::ZERO; r * d];
        for i in 0..r {
            let row = &self.nodes[a].value[i * d..(i + 1) * d];
            let grow = &g[i * d..(i + 1) * d];
            let mut sq = T::ZERO;
            for &v in row {
                sq += v * v;
            }
            let n = sq.sqrt();
            let c = n.maximum(eps);
            let mut gdot = T::ZERO;
            for (&gv, &v) in grow.iter().zip(row) {
                gdot += gv * v;
            }
            for k in 0..d {
                let mut dv = grow[k] / c;
                if n > eps {
                    dv -= row[k] * gdot / (c * c * c);
                }
                ga[i * d + k] = dv;
            }
        }
        self.flow_add(flow, a, &ga, |gv, _| gv);
    }

    fn backward_nearest(
        &self,
        flow: &mut [Option<Vec<T>>],
        x: usize,
        y: usize,
        nearest: &[usize],
        g: &[T],
    ) {
        let d = self.nodes[x].shape[1];
        let two = T::from_f64(2.0);
        let mut gx = vec![T::ZERO; self.nodes[x].value.len()];
        let mut gy = vec![T::ZERO; self.nodes[y].value.len()];
        for (i, &j) in nearest.iter().enumerate() {
            let xi = &self.nodes[x].value[i * d..(i + 1) * d];
            let yj = &self.nodes[y].value[j * d..(j + 1) * d];
            for k in 0..d {
                let diff = two * (xi[k] - yj[k]) * g[i];
                gx[i * d + k] += diff;
                gy[j * d + k] -= diff;
            }
        }
        self.flow_add(flow, x, &gx, |gv, _| gv);
        self.flow_add(flow, y, &gy, |gv, _| gv);
    }
}

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/π)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_bwd<T: Real>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * k * x * x)
}

fn permute_copy<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = row_major_strides(shape);
    let out_strides = row_major_strides(&out_shape);
    let mut out = vec![T::ZERO; src.len()];
    for (lin, o) in out.iter_mut().enumerate() {
        let mut rem = lin;
        let mut src_off = 0;
        for d in 0..rank {
            let idx = rem / out_strides[d];
            rem %= out_strides[d];
            src_off += idx * in_strides[perm[d]];
        }
        *o = src[src_off];
    }
    (out, out_shape)
}
