//! Reverse-mode gradient tape.
//!
//! Every op evaluates eagerly, appends one node, and records what its
//! backward rule needs. `backward` walks the nodes in exact reverse recording
//! order, so topological order holds by construction.

use std::collections::HashMap;

use super::dense::Tensor;
use crate::error::{contract_err, dim_err, Error, Result};

/// Normalization epsilon shared by `layer_norm` and `rms_norm`.
pub const NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Arithmetic mode. `F32` rounds every produced value to single precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Silu,
    Sigmoid,
    Exp,
    Log,
    Tanh,
    Abs,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize },
    RmsNorm { x: Var, axis: usize, gain: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    RepeatInterleave { x: Var, axis: usize, r: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    AvgPool2d { x: Var, k: usize },
    Attention { q: Var, k: Var, v: Var, segments: Vec<(usize, usize)>, probs: Vec<f64> },
    Rotary { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    CosineSim { a: Var, b: Var, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of eagerly evaluated ops.
///
/// One graph per forward/backward pass; graphs are cheap to create and are
/// not shared between training streams.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    pub(crate) bound: HashMap<(u64, usize), Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `n` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, n: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec)
    }
}

/// (outer, axis extent, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// `c = a·b + beta·c` where `a` is m×k and `b` is k×n, either optionally
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides describe row-major (or transposed row-major) layouts inside
    // those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, mut value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        // Leaves come from finite tensors built by callers; non-finite input is
        // still rejected by the next op that reads it.
        let mut t = t;
        if self.precision == Precision::F32 {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value as a gradient-free constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// `x·w (+ b)` for x of shape [n, in], w of shape [in, out].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- broadcasting binary ops ----------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (big, small) = if sa.len() >= sb.len() { (sa, sb) } else { (sb, sa) };
        let suffix_ok = small.len() <= big.len() && big[big.len() - small.len()..] == *small;
        let scalar = small == [1];
        if suffix_ok || scalar {
            Ok(big.to_vec())
        } else {
            dim_err(op, format!("{sa:?} and {sb:?} do not broadcast"))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let n: usize = shape.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let (na, nb) = (da.len(), db.len());
        let out: Vec<f64> = if na == n && nb == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % na], db[i % nb])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(name, Tensor::new(shape, out)?, op, rg)
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push("scale", t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push("add_scalar", t, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- unary ----------------------------------------------------------

    fn unary(&mut self, a: Var, u: Unary) -> Result<Var> {
        let (name, f): (&'static str, fn(f64) -> f64) = match u {
            Unary::Silu => ("silu", |x| x * sigmoid(x)),
            Unary::Sigmoid => ("sigmoid", sigmoid),
            Unary::Exp => ("exp", f64::exp),
            Unary::Log => ("log", f64::ln),
            Unary::Tanh => ("tanh", f64::tanh),
            Unary::Abs => ("abs", f64::abs),
            Unary::Sqrt => ("sqrt", f64::sqrt),
        };
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(name, t, Op::Unary(a, u), rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }

    // ---- normalization --------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let s = self.shape(x);
        if axis >= s.len() {
            return dim_err(op, format!("axis {axis} out of range for {s:?}"));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg)
    }

    /// `(x − mean) / sqrt(var + ε)` along `axis`; no affine parameters.
    pub fn layer_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| src[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (src[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + NORM_EPS).sqrt();
                for j in 0..n {
                    out[at(j)] = (src[at(j)] - mean) * r;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("layer_norm", Tensor::new(shape, out)?, Op::LayerNorm { x, axis }, rg)
    }

    /// `x / sqrt(mean(x²) + ε) · gain` along `axis`; `gain` has the axis extent.
    pub fn rms_norm(&mut self, x: Var, axis: usize, gain: Option<Var>) -> Result<Var> {
        self.check_axis("rms_norm", x, axis)?;
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        if let Some(g) = gain {
            if self.shape(g) != [n] {
                return dim_err("rms_norm", format!("gain {:?} vs axis extent {n}", self.shape(g)));
            }
        }
        let src = self.data(x);
        let gv = gain.map(|g| self.data(g));
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let ms = (0..n).map(|j| src[at(j)].powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (ms + NORM_EPS).sqrt();
                for j in 0..n {
                    out[at(j)] = src[at(j)] * r * gv.map_or(1.0, |g| g[j]);
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g));
        self.push("rms_norm", Tensor::new(shape, out)?, Op::RmsNorm { x, axis, gain }, rg)
    }

    /// Cosine similarity of `a` and `b` along `axis`; the axis is removed.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("cosine_similarity", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        self.check_axis("cosine_similarity", a, axis)?;
        let (outer, n, inner) = split_axis(self.shape(a), axis);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for j in 0..n {
                    ab += da[at(j)] * db[at(j)];
                    aa += da[at(j)] * da[at(j)];
                    bb += db[at(j)] * db[at(j)];
                }
                out[o * inner + i] = ab / (aa.sqrt() * bb.sqrt()).max(1e-12);
            }
        }
        let shape = drop_axis(self.shape(a), axis);
        let rg = self.rg(a) || self.rg(b);
        self.push("cosine_similarity", Tensor::new(shape, out)?, Op::CosineSim { a, b, axis }, rg)
    }

    // ---- convolution and pooling ----------------------------------------

    /// 2D convolution over [B, C, H, W] with square [O, C, k, k] kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return dim_err("conv2d", format!("input {sx:?}, kernel {sw:?}, stride {stride}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return dim_err("conv2d", format!("bias {:?}", self.shape(b)));
            }
        }
        let k = sw[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return dim_err("conv2d", "kernel larger than padded input");
        }
        let geom = ConvGeom {
            b: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            k,
            ho: (sx[2] + 2 * pad - k) / stride + 1,
            wo: (sx[3] + 2 * pad - k) / stride + 1,
            stride,
            pad,
        };
        let ckk = geom.c * k * k;
        let hw = geom.ho * geom.wo;
        let mut cols = vec![0.0; ckk * hw];
        let mut out = vec![0.0; geom.b * geom.o * hw];
        let xd = self.data(x);
        let wd = self.data(w);
        let in_sz = geom.c * geom.h * geom.w;
        for bi in 0..geom.b {
            geom.im2col(&xd[bi * in_sz..(bi + 1) * in_sz], &mut cols);
            gemm(geom.o, ckk, hw, wd, false, &cols, false, &mut out[bi * geom.o * hw..(bi + 1) * geom.o * hw], 0.0);
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for (idx, chunk) in out.chunks_mut(hw).enumerate() {
                let bias = bd[idx % geom.o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let shape = vec![geom.b, geom.o, geom.ho, geom.wo];
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push("conv2d", Tensor::new(shape, out)?, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// Non-overlapping k×k average pooling over [B, C, H, W].
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return dim_err("avg_pool2d", format!("{s:?} by {k}"));
        }
        let (ho, wo) = (s[2] / k, s[3] / k);
        let src = self.data(x);
        let mut out = vec![0.0; s[0] * s[1] * ho * wo];
        let norm = 1.0 / (k * k) as f64;
        for p in 0..s[0] * s[1] {
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    out[(p * ho + y / k) * wo + xx / k] += src[(p * s[2] + y) * s[3] + xx] * norm;
                }
            }
        }
        let rg = self.rg(x);
        self.push("avg_pool2d", Tensor::new(vec![s[0], s[1], ho, wo], out)?, Op::AvgPool2d { x, k }, rg)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).mean();
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let (outer, n, inner) = split_axis(self.shape(x), axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let shape = drop_axis(self.shape(x), axis);
        let rg = self.rg(x);
        self.push("sum_axis", Tensor::new(shape, out)?, Op::SumAxis { x, axis }, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err("permute", format!("{perm:?} for {s:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let in_st = strides(&s);
        let src_st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
        let out = permute_gather(self.data(x), &out_shape, &src_st);
        let rg = self.rg(x);
        self.push("permute", Tensor::new(out_shape, out)?, Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return dim_err("concat", "no inputs");
        };
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err("concat", format!("{s:?} vs {base:?} along {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push("concat", Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[axis] {
            return dim_err("slice", format!("[{start}, {}) of extent {}", start + len, s[axis]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        self.push("slice", Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg)
    }

    /// Repeats each entry along `axis` `r` times consecutively.
    pub fn repeat_interleave(&mut self, x: Var, axis: usize, r: usize) -> Result<Var> {
        self.check_axis("repeat_interleave", x, axis)?;
        if r == 0 {
            return dim_err("repeat_interleave", "zero repeats");
        }
        let s = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len() * r);
        for o in 0..outer {
            for j in 0..n * r {
                let jj = j / r;
                out.extend_from_slice(&src[(o * n + jj) * inner..(o * n + jj + 1) * inner]);
            }
        }
        let mut shape = s;
        shape[axis] *= r;
        let rg = self.rg(x);
        self.push("repeat_interleave", Tensor::new(shape, out)?, Op::RepeatInterleave { x, axis, r }, rg)
    }

    /// Row lookup: `table[idx[i]]` for a [V, d] table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return dim_err("gather_rows", format!("table {s:?}, {} indices", idx.len()));
        }
        let d = s[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push("gather_rows", Tensor::new(vec![idx.len(), d], out)?, Op::GatherRows { table, idx: idx.to_vec() }, rg)
    }

    // ---- attention ------------------------------------------------------

    /// Softmax attention over [N, H, dh] queries/keys/values.
    ///
    /// `segments` partition the N rows into independent sequences; attention
    /// is fully bidirectional inside each segment and absent across them.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return dim_err("attention", format!("q {s:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)));
        }
        let (n, heads, dh) = (s[0], s[1], s[2]);
        let mut covered = 0;
        for &(off, len) in segments {
            if off != covered || len == 0 {
                return dim_err("attention", "segments must tile the rows in order");
            }
            covered += len;
        }
        if covered != n {
            return dim_err("attention", format!("segments cover {covered} of {n} rows"));
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; n * heads * dh];
        let total: usize = segments.iter().map(|&(_, l)| l * l * heads).sum();
        let mut probs = Vec::with_capacity(total);
        let row = |t: usize, h: usize| (t * heads + h) * dh;
        for &(off, len) in segments {
            for h in 0..heads {
                for i in 0..len {
                    let qi = &qd[row(off + i, h)..row(off + i, h) + dh];
                    let base = probs.len();
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..len {
                        let kj = &kd[row(off + j, h)..row(off + j, h) + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        m = m.max(dot);
                        probs.push(dot);
                    }
                    let mut z = 0.0;
                    for p in &mut probs[base..] {
                        *p = (*p - m).exp();
                        z += *p;
                    }
                    let o = &mut out[row(off + i, h)..row(off + i, h) + dh];
                    for j in 0..len {
                        let p = probs[base + j] / z;
                        probs[base + j] = p;
                        let vj = &vd[row(off + j, h)..row(off + j, h) + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = Op::Attention {
            q,
            k,
            v,
            segments: segments.to_vec(),
            probs,
        };
        self.push("attention", Tensor::new(s, out)?, op, rg)
    }

    /// Rotates channel pairs (2p, 2p+1) of an [N, H, dh] tensor by per-token
    /// angles `angles[n * (dh/2) + p]`.
    pub fn rotary(&mut self, x: Var, angles: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[2] % 2 != 0 {
            return dim_err("rotary", format!("need [N, H, even dh], got {s:?}"));
        }
        let pairs = s[2] / 2;
        if angles.len() != s[0] * pairs {
            return dim_err("rotary", format!("{} angles for {} tokens x {pairs} pairs", angles.len(), s[0]));
        }
        let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
        let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for t in 0..s[0] {
            for h in 0..s[1] {
                let base = (t * s[1] + h) * s[2];
                for p in 0..pairs {
                    let (c, sn) = (cos[t * pairs + p], sin[t * pairs + p]);
                    let (x0, x1) = (src[base + 2 * p], src[base + 2 * p + 1]);
                    out[base + 2 * p] = x0 * c - x1 * sn;
                    out[base + 2 * p + 1] = x0 * sn + x1 * c;
                }
            }
        }
        let rg = self.rg(x);
        self.push("rotary", Tensor::new(s, out)?, Op::Rotary { x, cos, sin }, rg)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return contract_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(da) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, self.data(*b), true, da, 1.0);
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm(k, m, n, self.data(*a), true, g, false, db, 1.0);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = self.acc(grads, *a) {
                    let na = da.len();
                    for (j, gv) in g.iter().enumerate() {
                        da[j % na] += gv;
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    let nb = db.len();
                    for (j, gv) in g.iter().enumerate() {
                        db[j % nb] += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let (na, nb) = (xa.len(), xb.len());
                if let Some(da) = self.acc(grads, *a) {
                    for (j, gv) in g.iter().enumerate() {
                        da[j % na] += gv * xb[j % nb];
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % nb] += gv * xa[j % na];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += s * gv);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Unary(a, u) => {
                let x = self.data(*a);
                let u = *u;
                if let Some(da) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        let d = match u {
                            Unary::Silu => {
                                let s = sigmoid(x[j]);
                                s * (1.0 + x[j] * (1.0 - s))
                            }
                            Unary::Sigmoid => out[j] * (1.0 - out[j]),
                            Unary::Exp => out[j],
                            Unary::Log => 1.0 / x[j],
                            Unary::Tanh => 1.0 - out[j] * out[j],
                            Unary::Abs => x[j].signum() * (x[j] != 0.0) as u8 as f64,
                            Unary::Sqrt => 0.5 / out[j],
                        };
                        da[j] += g[j] * d;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + ii;
                            let dot: f64 = (0..n).map(|j| out[at(j)] * g[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let src = self.data(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + ii;
                            let mean = (0..n).map(|j| src[at(j)]).sum::<f64>() / n as f64;
                            let var = (0..n).map(|j| (src[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                            let r = 1.0 / (var + NORM_EPS).sqrt();
                            let mg = (0..n).map(|j| g[at(j)]).sum::<f64>() / n as f64;
                            let mgx = (0..n).map(|j| g[at(j)] * out[at(j)]).sum::<f64>() / n as f64;
                            for j in 0..n {
                                dx[at(j)] += r * (g[at(j)] - mg - out[at(j)] * mgx);
                            }
                        }
                    }
                }
            }
            Op::RmsNorm { x, axis, gain } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let src = self.data(*x);
                let gv = gain.map(|gn| self.data(gn).to_vec());
                let gainv = |j: usize| gv.as_ref().map_or(1.0, |v| v[j]);
                let mut dgain = gv.as_ref().map(|v| vec![0.0; v.len()]);
                let mut dxv = self.acc(grads, *x).map(|_| vec![0.0; src.len()]);
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        let ms = (0..n).map(|j| src[at(j)].powi(2)).sum::<f64>() / n as f64;
                        let r = 1.0 / (ms + NORM_EPS).sqrt();
                        if let Some(dg) = dgain.as_mut() {
                            for j in 0..n {
                                dg[j] += g[at(j)] * src[at(j)] * r;
                            }
                        }
                        if let Some(dx) = dxv.as_mut() {
                            // u = g * gain; dx = r * (u - xhat * mean(u * xhat))
                            let m = (0..n)
                                .map(|j| g[at(j)] * gainv(j) * src[at(j)] * r)
                                .sum::<f64>()
                                / n as f64;
                            for j in 0..n {
                                dx[at(j)] += r * (g[at(j)] * gainv(j) - src[at(j)] * r * m);
                            }
                        }
                    }
                }
                if let Some(dx) = dxv {
                    let t = self.acc(grads, *x).expect("requires grad");
                    t.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
                }
                if let (Some(gn), Some(dg)) = (gain, dgain) {
                    if let Some(t) = self.acc(grads, *gn) {
                        t.iter_mut().zip(dg).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::CosineSim { a, b, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let (da_, db_) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; da_.len()];
                let mut gb = vec![0.0; db_.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        let (mut aa, mut bb) = (0.0, 0.0);
                        for j in 0..n {
                            aa += da_[at(j)].powi(2);
                            bb += db_[at(j)].powi(2);
                        }
                        let denom = (aa.sqrt() * bb.sqrt()).max(1e-12);
                        let c = out[o * inner + ii];
                        let gv = g[o * inner + ii];
                        for j in 0..n {
                            let (x, y) = (da_[at(j)], db_[at(j)]);
                            ga[at(j)] += gv * (y / denom - c * x / aa.max(1e-24));
                            gb[at(j)] += gv * (x / denom - c * y / bb.max(1e-24));
                        }
                    }
                }
                if let Some(t) = self.acc(grads, *a) {
                    t.iter_mut().zip(ga).for_each(|(x, y)| *x += y);
                }
                if let Some(t) = self.acc(grads, *b) {
                    t.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let shp = self.nodes[i].value.shape();
                let geom = ConvGeom {
                    b: sx[0],
                    c: sx[1],
                    h: sx[2],
                    w: sx[3],
                    o: sw[0],
                    k: sw[2],
                    ho: shp[2],
                    wo: shp[3],
                    stride: *stride,
                    pad: *pad,
                };
                let ckk = geom.c * geom.k * geom.k;
                let hw = geom.ho * geom.wo;
                let in_sz = geom.c * geom.h * geom.w;
                if let Some(bv) = b {
                    if let Some(db) = self.acc(grads, *bv) {
                        for (idx, chunk) in g.chunks(hw).enumerate() {
                            db[idx % geom.o] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                let want_w = self.rg(*w);
                let want_x = self.rg(*x);
                let mut cols = vec![0.0; ckk * hw];
                let mut dw = if want_w { vec![0.0; geom.o * ckk] } else { Vec::new() };
                let mut dx = if want_x { vec![0.0; geom.b * in_sz] } else { Vec::new() };
                let xd = self.data(*x);
                let wd = self.data(*w);
                for bi in 0..geom.b {
                    let gb = &g[bi * geom.o * hw..(bi + 1) * geom.o * hw];
                    if want_w {
                        geom.im2col(&xd[bi * in_sz..(bi + 1) * in_sz], &mut cols);
                        gemm(geom.o, hw, ckk, gb, false, &cols, true, &mut dw, 1.0);
                    }
                    if want_x {
                        gemm(ckk, geom.o, hw, wd, true, gb, false, &mut cols, 0.0);
                        geom.col2im(&cols, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
                    }
                }
                if let Some(t) = self.acc(grads, *w) {
                    t.iter_mut().zip(dw).for_each(|(a, b)| *a += b);
                }
                if let Some(t) = self.acc(grads, *x) {
                    t.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
                }
            }
            Op::AvgPool2d { x, k } => {
                let s = self.shape(*x).to_vec();
                let (ho, wo) = (s[2] / k, s[3] / k);
                let norm = 1.0 / (k * k) as f64;
                if let Some(dx) = self.acc(grads, *x) {
                    for p in 0..s[0] * s[1] {
                        for y in 0..s[2] {
                            for xx in 0..s[3] {
                                dx[(p * s[2] + y) * s[3] + xx] += g[(p * ho + y / k) * wo + xx / k] * norm;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for j in 0..n {
                            let row = &mut dx[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, gv) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let s = self.shape(*x).to_vec();
                let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
                let in_st = strides(&s);
                let src_st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
                if let Some(dx) = self.acc(grads, *x) {
                    permute_scatter_add(g, &out_shape, &src_st, dx);
                }
            }
            Op::Concat { xs, axis } => {
                let base = self.shape(xs[0]).to_vec();
                let total = self.nodes[i].value.shape()[*axis];
                let (outer, _, inner) = split_axis(&base, *axis);
                let mut offset = 0;
                for v in xs {
                    let n = self.shape(*v)[*axis];
                    if let Some(dv) = self.acc(grads, *v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (d, s) in dv[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = self.nodes[i].value.shape()[*axis];
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let dst = &mut dx[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::RepeatInterleave { x, axis, r } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                if let Some(dx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for j in 0..n * r {
                            let jj = j / r;
                            let src = &g[(o * n * r + j) * inner..(o * n * r + j + 1) * inner];
                            for (d, s) in dx[(o * n + jj) * inner..(o * n + jj + 1) * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &ti) in idx.iter().enumerate() {
                        for c in 0..d {
                            dt[ti * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, segments, probs } => {
                let s = self.shape(*q);
                let (heads, dh) = (s[1], s[2]);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let n = s[0];
                let mut dq = vec![0.0; n * heads * dh];
                let mut dk = vec![0.0; n * heads * dh];
                let mut dv = vec![0.0; n * heads * dh];
                let row = |t: usize, h: usize| (t * heads + h) * dh;
                let mut pbase = 0;
                let mut dp = Vec::new();
                for &(off, len) in segments {
                    for h in 0..heads {
                        for ii in 0..len {
                            let p = &probs[pbase..pbase + len];
                            pbase += len;
                            let go = &g[row(off + ii, h)..row(off + ii, h) + dh];
                            dp.clear();
                            for j in 0..len {
                                let vj = &vd[row(off + j, h)..row(off + j, h) + dh];
                                dp.push(go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                                let dvj = &mut dv[row(off + j, h)..row(off + j, h) + dh];
                                for (d, gg) in dvj.iter_mut().zip(go) {
                                    *d += p[j] * gg;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qi_off = row(off + ii, h);
                            for j in 0..len {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj_off = row(off + j, h);
                                for c in 0..dh {
                                    dq[qi_off + c] += ds * kd[kj_off + c];
                                    dk[kj_off + c] += ds * qd[qi_off + c];
                                }
                            }
                        }
                    }
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(t) = self.acc(grads, var) {
                        t.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Rotary { x, cos, sin } => {
                let s = self.shape(*x).to_vec();
                let pairs = s[2] / 2;
                if let Some(dx) = self.acc(grads, *x) {
                    for t in 0..s[0] {
                        for h in 0..s[1] {
                            let base = (t * s[1] + h) * s[2];
                            for p in 0..pairs {
                                let (c, sn) = (cos[t * pairs + p], sin[t * pairs + p]);
                                let (g0, g1) = (g[base + 2 * p], g[base + 2 * p + 1]);
                                dx[base + 2 * p] += g0 * c + g1 * sn;
                                dx[base + 2 * p + 1] += -g0 * sn + g1 * c;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn permute_gather(src: &[f64], out_shape: &[usize], src_st: &[usize]) -> Vec<f64> {
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn permute_scatter_add(g: &[f64], out_shape: &[usize], src_st: &[usize], dx: &mut [f64]) {
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &gv in g {
        dx[off] += gv;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}
