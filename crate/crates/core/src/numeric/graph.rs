//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! evaluation order. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every leaf that requires them. Nodes whose inputs
//! all lack `requires_grad` are evaluated but never visited on the way back.

use std::borrow::Cow;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

use super::conv::{col2im, im2col, ConvGeom};
use super::real::{gemm, Mat};
use super::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannelBias {
        x: Var,
        b: Var,
        plane: usize,
    },
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        d: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        plane: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        nq: usize,
        nk: usize,
        dh: usize,
        probs: Vec<T>,
    },
    Concat(Vec<(Var, usize)>),
    Narrow {
        x: Var,
        offset: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        row: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        in_shape: Vec<usize>,
        perm: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    CrossEntropy {
        logits: Var,
        classes: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    MseMasked {
        pred: Var,
        cols: usize,
        diff: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<'a, T: Real> {
    shape: Vec<usize>,
    data: Cow<'a, [T]>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients of a scalar with respect to the graph's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording tape. Leaves may borrow parameter storage for the lifetime `'a`.
pub struct Graph<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += *x),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

fn permute_data<T: Real>(data: &[T], in_shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    // stride in the input for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    (out, out_shape)
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, parents: &[Var], op: Op<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_with(shape, Cow::Owned(data), requires_grad, op)
    }

    fn push_with(&mut self, shape: Vec<usize>, data: Cow<'a, [T]>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing `t`; inherits its `requires_grad` flag.
    pub fn input(&mut self, t: &'a Tensor<T>) -> Var {
        self.push_with(t.shape().to_vec(), Cow::Borrowed(t.data()), t.requires_grad(), Op::Leaf)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push_with(shape, Cow::Owned(t.into_data()), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.data.to_vec()).expect("graph node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product of `a: [m×k]` and `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            Mat::new(self.value(a), m, k),
            Mat::new(self.value(b), k, n),
            &mut out,
            false,
        );
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// `x · wᵀ + b` for `x: [rows×din]`, `w: [dout×din]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let (rows, din, dout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {dout} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            Mat::new(self.value(x), rows, din),
            Mat::new(self.value(w), dout, din).t(),
            &mut out,
            b.is_some(),
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            vec![rows, dout],
            out,
            &parents,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
        ))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::Scale(x, s))
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [C×…]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let channels = sx[0];
        if self.shape(b) != [channels] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for input {sx:?}", self.shape(b)),
            ));
        }
        let plane = self.value(x).len() / channels;
        let bias = self.value(b);
        let out = self
            .value(x)
            .chunks_exact(plane)
            .zip(bias)
            .flat_map(|(row, &bv)| row.iter().map(move |&v| v + bv))
            .collect();
        Ok(self.push(sx, out, &[x, b], Op::AddChannelBias { x, b, plane }))
    }

    /// Gaussian error linear unit, tanh form:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::Relu(x))
    }

    /// Fingerprint of which ReLU inputs are positive across the graph.
    /// Two evaluations with equal fingerprints lie on the same linear piece
    /// of every ReLU.
    pub fn relu_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.value(x) {
                    (v > T::zero()).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    // ---------------------------------------------------------------- normalization

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {sx:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).expect("dimension fits");
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            sx,
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                rstd,
            },
        ))
    }

    /// Group normalization of `x: [C×…]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let channels = sx[0];
        if groups == 0
            || !channels.is_multiple_of(groups)
            || self.shape(gamma) != [channels]
            || self.shape(beta) != [channels]
        {
            return Err(Error::shape("group_norm", format!("input {sx:?} with {groups} groups")));
        }
        let eps = T::from_f64_lossy(eps);
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let plane = xv.len() / channels;
        let group_len = plane * channels / groups;
        let gn = T::from_usize(group_len).expect("group size fits");
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); groups];
        let mut out = vec![T::zero(); xv.len()];
        for gi in 0..groups {
            let span = gi * group_len..(gi + 1) * group_len;
            let vals = &xv[span.clone()];
            let mean = vals.iter().copied().sum::<T>() / gn;
            let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / gn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[gi] = rs;
            for i in span {
                let c = i / plane;
                let h = (xv[i] - mean) * rs;
                xhat[i] = h;
                out[i] = g[c] * h + b[c];
            }
        }
        Ok(self.push(
            sx,
            out,
            &[x, gamma, beta],
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                plane,
                xhat,
                rstd,
            },
        ))
    }

    // ---------------------------------------------------------------- attention

    /// Softmax attention of `q: [h×nq×dh]` over `k, v: [h×nk×dh]`, logits
    /// scaled by `1/√dh`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sv != sk || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("q {sq:?}, k {sk:?}, v {sv:?}"),
            ));
        }
        let (heads, nq, dh) = (sq[0], sq[1], sq[2]);
        let nk = sk[1];
        let scale = T::one() / T::from_usize(dh).expect("dim fits").sqrt();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); heads * nq * dh];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let qh = &qv[h * nq * dh..(h + 1) * nq * dh];
            let kh = &kv[h * nk * dh..(h + 1) * nk * dh];
            let vh = &vv[h * nk * dh..(h + 1) * nk * dh];
            let ph = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(Mat::new(qh, nq, dh), Mat::new(kh, nk, dh).t(), ph, false);
            for row in ph.chunks_exact_mut(nk) {
                let mut max = T::neg_infinity();
                for s in row.iter_mut() {
                    *s *= scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut total = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in row.iter_mut() {
                    *s /= total;
                }
            }
            gemm(
                Mat::new(ph, nq, nk),
                Mat::new(vh, nk, dh),
                &mut out[h * nq * dh..(h + 1) * nq * dh],
                false,
            );
        }
        Ok(self.push(
            vec![heads, nq, dh],
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                heads,
                nq,
                nk,
                dh,
                probs,
            },
        ))
    }

    // ---------------------------------------------------------------- layout

    /// Concatenation along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        let mut record = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("trailing dims {:?} vs {tail:?}", &sp[1..]),
                ));
            }
            rows += sp[0];
            out.extend_from_slice(self.value(p));
            record.push((p, self.value(p).len()));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(shape, out, parts, Op::Concat(record)))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if len == 0 || start + len > sx[0] {
            return Err(Error::shape(
                "narrow",
                format!("rows {start}..{} of {sx:?}", start + len),
            ));
        }
        let row: usize = sx[1..].iter().product();
        let out = self.value(x)[start * row..(start + len) * row].to_vec();
        let mut shape = sx;
        shape[0] = len;
        Ok(self.push(shape, out, &[x], Op::Narrow { x, offset: start * row }))
    }

    /// Selects rows of `x` (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= sx[0]) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {sx:?}"),
            ));
        }
        let row: usize = sx[1..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let mut shape = sx;
        shape[0] = idx.len();
        Ok(self.push(
            shape,
            out,
            &[x],
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                row,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, &[x], Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len()
            || perm
                .iter()
                .any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", format!("{perm:?} for {sx:?}")));
        }
        let (out, shape) = permute_data(self.value(x), &sx, perm);
        Ok(self.push(
            shape,
            out,
            &[x],
            Op::Permute {
                x,
                in_shape: sx,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    // ---------------------------------------------------------------- convolution

    /// Cross-correlation of `x: [C_in×H×W]` with `w: [C_out×C_in×k×k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernels {sw:?}")));
        }
        let geom = ConvGeom::for_conv(sx[0], sx[1], sx[2], sw[0], sw[2], stride, padding)?;
        let cols = im2col(self.value(x), &geom);
        let mut out = vec![T::zero(); geom.cout * geom.ho * geom.wo];
        gemm(
            Mat::new(self.value(w), geom.cout, geom.cin * geom.k * geom.k),
            Mat::new(&cols, geom.cin * geom.k * geom.k, geom.ho * geom.wo),
            &mut out,
            false,
        );
        let keep = if self.requires_grad(w) { cols } else { Vec::new() };
        Ok(self.push(
            vec![geom.cout, geom.ho, geom.wo],
            out,
            &[x, w],
            Op::Conv2d { x, w, geom, cols: keep },
        ))
    }

    /// Adjoint of [`Graph::conv2d`]: `x: [C_in×H×W]`, `w: [C_in×C_out×k×k]`,
    /// output `[C_out × ((H−1)·stride − 2·padding + k) × …]`.
    pub fn transposed_conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("input {sx:?}, kernels {sw:?}"),
            ));
        }
        if stride == 0 || sw[2] == 0 {
            return Err(Error::shape("transposed_conv2d", "stride and kernel must be ≥ 1"));
        }
        let k = sw[2];
        let full_h = (sx[1] - 1) * stride + k;
        let full_w = (sx[2] - 1) * stride + k;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("padding {padding} consumes the whole output"),
            ));
        }
        let (ho, wo) = (full_h - 2 * padding, full_w - 2 * padding);
        // Geometry of the forward convolution this operator is the adjoint of.
        let geom = ConvGeom::for_conv(sw[1], ho, wo, sx[0], k, stride, padding)?;
        if geom.ho != sx[1] || geom.wo != sx[2] {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("no integral preimage for {sx:?} at stride {stride}"),
            ));
        }
        let ckk = geom.cin * k * k;
        let mut cols = vec![T::zero(); ckk * geom.ho * geom.wo];
        gemm(
            Mat::new(self.value(w), geom.cout, ckk).t(),
            Mat::new(self.value(x), geom.cout, geom.ho * geom.wo),
            &mut cols,
            false,
        );
        let out = col2im(&cols, &geom);
        Ok(self.push(
            vec![geom.cin, geom.h, geom.w],
            out,
            &[x, w],
            Op::ConvTranspose2d { x, w, geom },
        ))
    }

    // ---------------------------------------------------------------- losses and reductions

    /// Mean over pixels of `−log softmax(logits)[label]` for `logits: [C×H×W]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() < 2 {
            return Err(Error::shape("cross_entropy", format!("logits {sl:?}")));
        }
        let classes = sl[0];
        let pixels = self.value(logits).len() / classes;
        if labels.len() != pixels {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {pixels} pixels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0f64;
        for p in 0..pixels {
            let mut max = T::neg_infinity();
            for c in 0..classes {
                max = max.max(lv[c * pixels + p]);
            }
            let mut denom = T::zero();
            for c in 0..classes {
                let e = (lv[c * pixels + p] - max).exp();
                probs[c * pixels + p] = e;
                denom += e;
            }
            for c in 0..classes {
                probs[c * pixels + p] /= denom;
            }
            total += ((max - lv[labels[p] * pixels + p]) + denom.ln())
                .to_f64()
                .expect("finite");
        }
        let loss = T::from_f64(total / pixels as f64).expect("loss fits");
        Ok(self.push(
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                classes,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean squared error over the rows of `pred: [N×p]` selected by `mask`.
    pub fn mse_masked(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Result<Var> {
        let sp = self.shape(pred).to_vec();
        if sp.len() != 2 || target.len() != self.value(pred).len() || mask.len() != sp[0] {
            return Err(Error::shape(
                "mse_masked",
                format!("pred {sp:?}, {} targets, {} mask rows", target.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidArgument("mse_masked: mask selects no rows".into()));
        }
        let cols = sp[1];
        let pv = self.value(pred);
        let mut diff = vec![T::zero(); pv.len()];
        let mut total = T::zero();
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for j in r * cols..(r + 1) * cols {
                let d = pv[j] - target[j];
                diff[j] = d;
                total += d * d;
            }
        }
        let loss = total / T::from_usize(count * cols).expect("count fits");
        Ok(self.push(
            vec![1],
            vec![loss],
            &[pred],
            Op::MseMasked {
                pred,
                cols,
                diff,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        self.push(vec![1], vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).expect("length fits");
        let s = self.value(x).iter().copied().sum::<T>() / n;
        self.push(vec![1], vec![s], &[x], Op::Mean(x))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a one-element node. Only leaves keep their gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<'a, T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(Mat::new(&g, m, n), Mat::new(self.value(*b), k, n).t(), &mut ga, false);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(Mat::new(self.value(*a), m, k).t(), Mat::new(&g, m, n), &mut gb, false);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); rows * din];
                    gemm(
                        Mat::new(&g, rows, dout),
                        Mat::new(self.value(*w), dout, din),
                        &mut gx,
                        false,
                    );
                    accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); dout * din];
                    gemm(
                        Mat::new(&g, rows, dout).t(),
                        Mat::new(self.value(*x), rows, din),
                        &mut gw,
                        false,
                    );
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.chunks_exact(dout) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += *v);
                    }
                    accumulate(grads, b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = g.iter().zip(self.value(*b)).map(|(&u, &v)| u * v).collect();
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = g.iter().zip(self.value(*a)).map(|(&u, &v)| u * v).collect();
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
            }
            Op::AddChannelBias { x, b, plane } => {
                if self.wants(*b) {
                    let gb = g.chunks_exact(*plane).map(|c| c.iter().copied().sum()).collect();
                    accumulate(grads, *b, gb);
                }
                if self.wants(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&u, &v)| u * gelu_derivative(v))
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let gam = self.value(*gamma);
                if self.wants(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    let mut gb = vec![T::zero(); d];
                    for grow in g.chunks_exact(d) {
                        gb.iter_mut().zip(grow).for_each(|(s, v)| *s += *v);
                    }
                    accumulate(grads, *beta, gb);
                }
                if self.wants(*x) {
                    let dn = T::from_usize(d).expect("dimension fits");
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let grow = &g[span.clone()];
                        let hrow = &xhat[span.clone()];
                        let mut mean_gh = T::zero();
                        let mut mean_ghh = T::zero();
                        for j in 0..d {
                            let gh = grow[j] * gam[j];
                            mean_gh += gh;
                            mean_ghh += gh * hrow[j];
                        }
                        mean_gh /= dn;
                        mean_ghh /= dn;
                        for j in 0..d {
                            let gh = grow[j] * gam[j];
                            gx[r * d + j] = rs * (gh - mean_gh - hrow[j] * mean_ghh);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                plane,
                xhat,
                rstd,
            } => {
                let (groups, plane) = (*groups, *plane);
                let channels = g.len() / plane;
                let gam = self.value(*gamma);
                if self.wants(*gamma) {
                    let gg = (0..channels)
                        .map(|c| {
                            let span = c * plane..(c + 1) * plane;
                            g[span.clone()].iter().zip(&xhat[span]).map(|(&u, &h)| u * h).sum()
                        })
                        .collect();
                    accumulate(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    let gb = g.chunks_exact(plane).map(|c| c.iter().copied().sum()).collect();
                    accumulate(grads, *beta, gb);
                }
                if self.wants(*x) {
                    let group_len = g.len() / groups;
                    let gn = T::from_usize(group_len).expect("group fits");
                    let mut gx = vec![T::zero(); g.len()];
                    for (gi, &rs) in rstd.iter().enumerate() {
                        let span = gi * group_len..(gi + 1) * group_len;
                        let mut mean_gh = T::zero();
                        let mut mean_ghh = T::zero();
                        for i in span.clone() {
                            let gh = g[i] * gam[i / plane];
                            mean_gh += gh;
                            mean_ghh += gh * xhat[i];
                        }
                        mean_gh /= gn;
                        mean_ghh /= gn;
                        for i in span {
                            let gh = g[i] * gam[i / plane];
                            gx[i] = rs * (gh - mean_gh - xhat[i] * mean_ghh);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                nq,
                nk,
                dh,
                probs,
            } => {
                let (heads, nq, nk, dh) = (*heads, *nq, *nk, *dh);
                let scale = T::one() / T::from_usize(dh).expect("dim fits").sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = vec![T::zero(); qv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gv = vec![T::zero(); vv.len()];
                let mut gs = vec![T::zero(); nq * nk];
                for h in 0..heads {
                    let qspan = h * nq * dh..(h + 1) * nq * dh;
                    let kspan = h * nk * dh..(h + 1) * nk * dh;
                    let ph = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let go = &g[qspan.clone()];
                    gemm(
                        Mat::new(ph, nq, nk).t(),
                        Mat::new(go, nq, dh),
                        &mut gv[kspan.clone()],
                        false,
                    );
                    gemm(
                        Mat::new(go, nq, dh),
                        Mat::new(&vv[kspan.clone()], nk, dh).t(),
                        &mut gs,
                        false,
                    );
                    for (srow, prow) in gs.chunks_exact_mut(nk).zip(ph.chunks_exact(nk)) {
                        let dot: T = srow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for (s, &p) in srow.iter_mut().zip(prow) {
                            *s = p * (*s - dot) * scale;
                        }
                    }
                    gemm(
                        Mat::new(&gs, nq, nk),
                        Mat::new(&kv[kspan.clone()], nk, dh),
                        &mut gq[qspan.clone()],
                        false,
                    );
                    gemm(
                        Mat::new(&gs, nq, nk).t(),
                        Mat::new(&qv[qspan], nq, dh),
                        &mut gk[kspan],
                        false,
                    );
                }
                if self.wants(*q) {
                    accumulate(grads, *q, gq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, gk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, gv);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &(p, len) in parts {
                    if self.wants(p) {
                        accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, offset } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                gx[*offset..*offset + g.len()].copy_from_slice(&g);
                accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, idx, row } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    gx[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[r * row..(r + 1) * row])
                        .for_each(|(s, v)| *s += *v);
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Permute { x, in_shape, perm } => {
                let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (gx, _) = permute_data(&g, &out_shape, &inverse);
                accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let ckk = geom.cin * geom.k * geom.k;
                let hw = geom.ho * geom.wo;
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); geom.cout * ckk];
                    gemm(Mat::new(&g, geom.cout, hw), Mat::new(cols, ckk, hw).t(), &mut gw, false);
                    accumulate(grads, *w, gw);
                }
                if self.wants(*x) {
                    let mut gcols = vec![T::zero(); ckk * hw];
                    gemm(
                        Mat::new(self.value(*w), geom.cout, ckk).t(),
                        Mat::new(&g, geom.cout, hw),
                        &mut gcols,
                        false,
                    );
                    accumulate(grads, *x, col2im(&gcols, geom));
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let ckk = geom.cin * geom.k * geom.k;
                let hw = geom.ho * geom.wo;
                let gcols = im2col(&g, geom);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); geom.cout * hw];
                    gemm(
                        Mat::new(self.value(*w), geom.cout, ckk),
                        Mat::new(&gcols, ckk, hw),
                        &mut gx,
                        false,
                    );
                    accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); geom.cout * ckk];
                    gemm(
                        Mat::new(self.value(*x), geom.cout, hw),
                        Mat::new(&gcols, ckk, hw).t(),
                        &mut gw,
                        false,
                    );
                    accumulate(grads, *w, gw);
                }
            }
            Op::CrossEntropy {
                logits,
                classes,
                probs,
                labels,
            } => {
                let pixels = probs.len() / classes;
                let scale = g[0] / T::from_usize(pixels).expect("pixel count fits");
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (p, &l) in labels.iter().enumerate() {
                    gl[l * pixels + p] -= scale;
                }
                accumulate(grads, *logits, gl);
            }
            Op::MseMasked {
                pred,
                cols,
                diff,
                mask,
                count,
            } => {
                let scale = g[0] * T::from_f64_lossy(2.0) / T::from_usize(count * cols).expect("fits");
                let mut gp = vec![T::zero(); diff.len()];
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in r * cols..(r + 1) * cols {
                        gp[j] = diff[j] * scale;
                    }
                }
                accumulate(grads, *pred, gp);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = g[0] / T::from_usize(n).expect("length fits");
                accumulate(grads, *x, vec![v; n]);
            }
        }
    }
}
