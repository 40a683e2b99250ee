//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Leaves are either
//! tracked parameters ([`Graph::param`]) or constants ([`Graph::constant`]);
//! any node computed from a tracked input is itself tracked. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the vector-Jacobian products for every tracked node.
//!
//! Shapes follow a deliberately small contract: matrix ops are strictly 2-D
//! (or 3-D for the batched variants), elementwise binaries need identical
//! shapes, and the only broadcast is [`Graph::add_row_bias`].

use super::tensor::{dot, norm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RmsNorm {
        x: Var,
        y: Vec<f64>,
        inv_rms: Vec<f64>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    PadReflect {
        x: Var,
        pad: usize,
    },
    MeanRows(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Reshape(Var),
    Sum(Var),
    SelectRows {
        x: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    CosRows {
        a: Var,
        b: Var,
        clamp: bool,
    },
    PairwiseCos {
        x: Var,
        clamp: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, or `None` when `v` is
    /// not tracked or does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros for untouched nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c (m×n) = beta·c + op(a) (m×k) · op(b) (k×n)`; `ta`/`tb` mean the stored
/// matrix is the transpose of the operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    // SAFETY: the slices above have exactly the extents implied by the
    // strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf: gradients flow to it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn out(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced a consistent tensor")
    }

    // ---- linear algebra ----

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut c, 0.0);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Self::out(vec![m, n], c), Op::MatMul(a, b), tracked))
    }

    /// Batched matmul `[B,m,k] · [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut c = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut c[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Self::out(vec![bs, m, n], c), Op::BatchMatMul(a, b), tracked))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (bs, m, n) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::shape("transpose", format!("{s:?}"))),
        };
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for b in 0..bs {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = d[off + i * n + j];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Self::out(shape, out), Op::Transpose(x), tracked))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Self::out(shape, out), Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Self::out(shape, out), Op::Mul(a, b), tracked))
    }

    /// Adds `bias` (shape `[n]`) to every length-`n` row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.is_empty() || sb.len() != 1 || sx[sx.len() - 1] != sb[0] {
            return Err(Error::shape("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sb[0];
        let b = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        let tracked = self.tracked_any(&[x, bias]);
        Ok(self.push(Self::out(shape, out), Op::AddRowBias(x, bias), tracked))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let tracked = self.tracked_any(&[x]);
        self.push(t, Op::Scale(x, s), tracked)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v + s);
        let tracked = self.tracked_any(&[x]);
        self.push(t, Op::AddScalar(x), tracked)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let tracked = self.tracked_any(&[x]);
        self.push(t, Op::Gelu(x), tracked)
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes only where
    /// `lo < x < hi`; at the boundary it is zero.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::arg(format!("clamp: lo {lo} > hi {hi}")));
        }
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(t, Op::Clamp { x, lo, hi }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    // ---- reductions and normalization ----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&n) = s.last() else {
            return Err(Error::shape("softmax", "scalar input"));
        };
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Self::out(s, out), Op::Softmax(x), tracked))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&d) = s.last() else {
            return Err(Error::shape("layer_norm", "scalar input"));
        };
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {s:?}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked_any(&[x, gain, bias]);
        Ok(self.push(
            Self::out(s, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Scales each row of the last axis to unit root-mean-square.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&d) = s.last() else {
            return Err(Error::shape("rms_norm", "scalar input"));
        };
        let xs = self.data(x);
        let rows = xs.len() / d;
        let mut y = vec![0.0; xs.len()];
        let mut inv_rms = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let is = 1.0 / (dot(row, row) / d as f64 + eps).sqrt();
            inv_rms[r] = is;
            for j in 0..d {
                y[r * d + j] = row[j] * is;
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Self::out(s, y.clone()), Op::RmsNorm { x, y, inv_rms }, tracked))
    }

    /// Mean over the leading axis: `[n, ...] -> [...]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("mean_pool", "scalar input"));
        }
        let rows = s[0];
        let w = self.value(x).row_len();
        let d = self.data(x);
        let mut out = vec![0.0; w];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&d[r * w..(r + 1) * w]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Self::out(s[1..].to_vec(), out), Op::MeanRows(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let tracked = self.tracked_any(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    // ---- row plumbing ----

    /// Gathers rows of the leading axis; indices may repeat.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || indices.is_empty() {
            return Err(Error::shape("select_rows", format!("{s:?}, {} indices", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape("select_rows", format!("index {bad} out of {} rows", s[0])));
        }
        let w = self.value(x).row_len();
        let d = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            out.extend_from_slice(&d[i * w..(i + 1) * w]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(
            Self::out(shape, out),
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            tracked,
        ))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let tail = self.shape(first).get(1..).map(<[usize]>::to_vec).unwrap_or_default();
        if self.shape(first).is_empty() {
            return Err(Error::shape("concat_rows", "scalar input"));
        }
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", format!("{s:?} vs [_, {tail:?}]")));
            }
            rows += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let tracked = self.tracked_any(parts);
        Ok(self.push(Self::out(shape, out), Op::ConcatRows(parts.to_vec()), tracked))
    }

    // ---- convolution ----

    /// 2-D convolution on channel-last images.
    ///
    /// `x: [H, W, Cin]`, `kernel: [kh, kw, Cin, Cout]`, zero padding `pad`.
    /// Output is `[Ho, Wo, Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sx[2] != sk[2] || stride == 0 {
            return Err(Error::shape("conv2d", format!("image {sx:?}, kernel {sk:?}, stride {stride}")));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded image")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(self.data(x), &geom);
        let kc = kh * kw * cin;
        let mut out = vec![0.0; ho * wo * cout];
        gemm(ho * wo, kc, cout, &cols, false, self.data(kernel), false, &mut out, 0.0);
        let tracked = self.tracked_any(&[x, kernel]);
        Ok(self.push(
            Self::out(vec![ho, wo, cout], out),
            Op::Conv2d {
                x,
                kernel,
                geom,
                cols,
            },
            tracked,
        ))
    }

    /// Reflect padding (edge pixel not repeated) of a channel-last image.
    pub fn pad_reflect(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pad >= s[0] || pad >= s[1] {
            return Err(Error::shape("pad_reflect", format!("{s:?}, pad {pad}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let d = self.data(x);
        let mut out = vec![0.0; hp * wp * c];
        for y in 0..hp {
            let sy = reflect(y as isize - pad as isize, h);
            for xx in 0..wp {
                let sx = reflect(xx as isize - pad as isize, w);
                let src = (sy * w + sx) * c;
                let dst = (y * wp + xx) * c;
                out[dst..dst + c].copy_from_slice(&d[src..src + c]);
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Self::out(vec![hp, wp, c], out), Op::PadReflect { x, pad }, tracked))
    }

    // ---- similarity ----

    /// Row-wise cosine similarity. `[n, d] x [n, d] -> [n]`, or
    /// `[d] x [d] -> []`. With `clamp`, negative values become zero and
    /// their gradient vanishes.
    pub fn cos_rows(&mut self, a: Var, b: Var, clamp: bool) -> Result<Var> {
        let op = if clamp { "cos_sim_clamped" } else { "cos_sim_raw" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.is_empty() || sa.len() > 2 {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let (rows, w) = if sa.len() == 1 { (1, sa[0]) } else { (sa[0], sa[1]) };
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (ra, rb) = (&va.data()[r * w..(r + 1) * w], &vb.data()[r * w..(r + 1) * w]);
            let c = cosine(op, ra, rb, r)?;
            out.push(if clamp { c.max(0.0) } else { c });
        }
        let shape = if sa.len() == 1 { vec![] } else { vec![rows] };
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Self::out(shape, out), Op::CosRows { a, b, clamp }, tracked))
    }

    pub fn cos_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.cos_rows(a, b, false)
    }

    pub fn cos_sim_clamped(&mut self, a: Var, b: Var) -> Result<Var> {
        self.cos_rows(a, b, true)
    }

    /// `½ Σ_{k≠j} cos(x_k, x_j)` over the rows of `x: [n, d]`.
    pub fn pairwise_cos_sum(&mut self, x: Var, clamp: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("pairwise_cos_sum", format!("{s:?}")));
        }
        if s[0] < 2 {
            return Err(Error::arg(format!("pairwise_cos_sum needs at least 2 rows, got {}", s[0])));
        }
        let v = self.value(x);
        let n = s[0];
        let mut total = 0.0;
        for k in 0..n {
            for j in 0..n {
                if k == j {
                    continue;
                }
                let c = cosine("pairwise_cos_sum", v.row(k), v.row(j), k)?;
                total += if clamp { c.max(0.0) } else { c };
            }
        }
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::scalar(0.5 * total), Op::PairwiseCos { x, clamp }, tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---- reverse pass ----

    /// Reverse-mode gradients of the scalar node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Self::out(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.is_tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut da, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.is_tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut db, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.data(*a), self.data(*b));
                if self.is_tracked(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &vb[t * k * n..(t + 1) * k * n],
                            true,
                            &mut da[t * m * k..(t + 1) * m * k],
                            0.0,
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.is_tracked(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for t in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &va[t * m * k..(t + 1) * m * k],
                            true,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &mut db[t * k * n..(t + 1) * k * n],
                            0.0,
                        );
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (bs, m, n) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                let mut dx = vec![0.0; g.len()];
                for b in 0..bs {
                    let off = b * m * n;
                    for r in 0..m {
                        for c in 0..n {
                            dx[off + r * n + c] = g[off + c * m + r];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    let da = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.is_tracked(*b) {
                    let db = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.is_tracked(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    for (j, v) in g.iter().enumerate() {
                        db[j % n] += v;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * s).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gain)[0];
                let gv = self.data(*gain);
                if self.is_tracked(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dh = vec![0.0; d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dot(&dh, hr) / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = is * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.is_tracked(*gain) {
                    let mut dg = vec![0.0; d];
                    for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[j % d] += gv * h;
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.is_tracked(*bias) {
                    let mut db = vec![0.0; d];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % d] += gv;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::RmsNorm { x, y, inv_rms } => {
                let d = y.len() / inv_rms.len();
                let mut dx = vec![0.0; g.len()];
                for (r, &is) in inv_rms.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let mean_gy = dot(gr, yr) / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = is * (gr[j] - yr[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d {
                x,
                kernel,
                geom,
                cols,
            } => {
                let kc = geom.kh * geom.kw * geom.cin;
                let npix = geom.ho * geom.wo;
                if self.is_tracked(*kernel) {
                    let mut dk = vec![0.0; kc * geom.cout];
                    gemm(kc, npix, geom.cout, cols, true, g, false, &mut dk, 0.0);
                    self.accumulate(grads, *kernel, dk);
                }
                if self.is_tracked(*x) {
                    let mut dcols = vec![0.0; npix * kc];
                    gemm(npix, geom.cout, kc, g, false, self.data(*kernel), true, &mut dcols, 0.0);
                    self.accumulate(grads, *x, col2im(&dcols, geom));
                }
            }
            Op::PadReflect { x, pad } => {
                let s = self.shape(*x);
                let (h, w, c) = (s[0], s[1], s[2]);
                let wp = w + 2 * pad;
                let hp = h + 2 * pad;
                let mut dx = vec![0.0; h * w * c];
                for y in 0..hp {
                    let sy = reflect(y as isize - *pad as isize, h);
                    for xx in 0..wp {
                        let sx = reflect(xx as isize - *pad as isize, w);
                        let src = (y * wp + xx) * c;
                        let dst = (sy * w + sx) * c;
                        for ch in 0..c {
                            dx[dst + ch] += g[src + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let rows = self.shape(*x)[0];
                let inv = 1.0 / rows as f64;
                let mut dx = Vec::with_capacity(rows * g.len());
                for _ in 0..rows {
                    dx.extend(g.iter().map(|v| v * inv));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
            }
            Op::SelectRows { x, indices } => {
                let w = self.value(*x).row_len();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..w {
                        dx[src * w + j] += g[r * w + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::CosRows { a, b, clamp } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let w = *va.shape().last().unwrap();
                let rows = va.len() / w;
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for r in 0..rows {
                    let (ra, rb) = (&va.data()[r * w..(r + 1) * w], &vb.data()[r * w..(r + 1) * w]);
                    let (na, nb) = (norm(ra), norm(rb));
                    let c = dot(ra, rb) / (na * nb);
                    if *clamp && c <= 0.0 {
                        continue;
                    }
                    let gr = g[r];
                    for j in 0..w {
                        da[r * w + j] = gr * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        db[r * w + j] = gr * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::PairwiseCos { x, clamp } => {
                let v = self.value(*x);
                let (n, d) = (v.shape()[0], v.shape()[1]);
                let norms: Vec<f64> = (0..n).map(|k| norm(v.row(k))).collect();
                let mut units = Vec::with_capacity(n * d);
                for (k, nk) in norms.iter().enumerate() {
                    units.extend(v.row(k).iter().map(|x| x / nk));
                }
                let mut dx = vec![0.0; n * d];
                let mut du = vec![0.0; d];
                for k in 0..n {
                    du.iter_mut().for_each(|x| *x = 0.0);
                    let uk = &units[k * d..(k + 1) * d];
                    for j in 0..n {
                        if j == k {
                            continue;
                        }
                        let uj = &units[j * d..(j + 1) * d];
                        if *clamp && dot(v.row(k), v.row(j)) / (norms[k] * norms[j]) <= 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            du[t] += uj[t];
                        }
                    }
                    let proj = dot(&du, uk);
                    for t in 0..d {
                        dx[k * d + t] = g[0] * (du[t] - proj * uk[t]) / norms[k];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn cosine(op: &'static str, a: &[f64], b: &[f64], row: usize) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::Domain {
            op,
            detail: format!("argument `a` has zero norm (row {row})"),
        });
    }
    if nb == 0.0 {
        return Err(Error::Domain {
            op,
            detail: format!("argument `b` has zero norm (row {row})"),
        });
    }
    Ok(dot(a, b) / (na * nb))
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kc = g.kh * g.kw * g.cin;
    let mut cols = vec![0.0; g.ho * g.wo * kc];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let base = (oy * g.wo + ox) * kc;
            for i in 0..g.kh {
                let y = (oy * g.stride + i) as isize - g.pad as isize;
                if y < 0 || y >= g.h as isize {
                    continue;
                }
                for j in 0..g.kw {
                    let xx = (ox * g.stride + j) as isize - g.pad as isize;
                    if xx < 0 || xx >= g.w as isize {
                        continue;
                    }
                    let src = (y as usize * g.w + xx as usize) * g.cin;
                    let dst = base + (i * g.kw + j) * g.cin;
                    cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kc = g.kh * g.kw * g.cin;
    let mut x = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let base = (oy * g.wo + ox) * kc;
            for i in 0..g.kh {
                let y = (oy * g.stride + i) as isize - g.pad as isize;
                if y < 0 || y >= g.h as isize {
                    continue;
                }
                for j in 0..g.kw {
                    let xx = (ox * g.stride + j) as isize - g.pad as isize;
                    if xx < 0 || xx >= g.w as isize {
                        continue;
                    }
                    let dst = (y as usize * g.w + xx as usize) * g.cin;
                    let src = base + (i * g.kw + j) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] += cols[src + c];
                    }
                }
            }
        }
    }
    x
}
