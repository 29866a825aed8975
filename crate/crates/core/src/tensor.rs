//! Dense row-major `f32` tensors and the numerical kernels the networks are built from.
//!
//! Image tensors use NCHW layout. For spectrograms H is the frequency axis and W is the
//! time axis. Convolutions are stride 1 with "same" zero padding (`dilation * (k - 1) / 2`
//! on each side), lowered to im2col + sgemm in bounded row chunks.

use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f32, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Upper bound on im2col scratch size (in floats) per chunk.
const COL_CHUNK_FLOATS: usize = 1 << 17;

fn rows_per_chunk(k_dim: usize, h: usize, w: usize) -> usize {
    (COL_CHUNK_FLOATS / (k_dim * w).max(1)).clamp(1, h)
}

thread_local! {
    static COL_SCRATCH: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

/// Run `f` with a reused scratch buffer of at least `len` floats. Its contents are
/// unspecified; `im2col` overwrites every element it hands to `gemm`.
fn with_col_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    COL_SCRATCH.with(|cell| match cell.try_borrow_mut() {
        Ok(mut buf) => {
            if buf.len() < len {
                buf.resize(len, 0.0);
            }
            f(&mut buf[..len])
        }
        Err(_) => f(&mut vec![0.0; len]),
    })
}

/// Fill `col` (shape `[ci*k*k, (y1-y0)*w]`) with the patches of image `x` (`[ci, h, w]`)
/// feeding output rows `y0..y1`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    y0: usize,
    y1: usize,
    col: &mut [f32],
) {
    let pad = (dilation * (k - 1) / 2) as isize;
    let rows = y1 - y0;
    let plane = rows * w;
    for c in 0..ci {
        let src_plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            let dy = (ki * dilation) as isize - pad;
            for kj in 0..k {
                let dx = (kj * dilation) as isize - pad;
                let base = ((c * k + ki) * k + kj) * plane;
                let dst_plane = &mut col[base..base + plane];
                // valid output columns: 0 <= xo + dx < w
                let xo_lo = (-dx).clamp(0, w as isize) as usize;
                let xo_hi = (w as isize - dx).clamp(0, w as isize) as usize;
                for (r, y) in (y0..y1).enumerate() {
                    let dst = &mut dst_plane[r * w..(r + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || xo_lo >= xo_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &src_plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..xo_lo].fill(0.0);
                    dst[xo_hi..].fill(0.0);
                    let s0 = (xo_lo as isize + dx) as usize;
                    dst[xo_lo..xo_hi].copy_from_slice(&src[s0..s0 + (xo_hi - xo_lo)]);
                }
            }
        }
    }
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    debug_assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb || k == 0);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the slices cover every index addressed by the given dimensions and strides
    // (checked above in debug builds, guaranteed by the callers' shape arithmetic).
    unsafe {
        matrixmultiply::sgemm(
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Stride-1 same-padded 2-d convolution (cross-correlation). `x: [b, ci, h, w]`,
/// `w: [co, ci, k, k]` with odd `k`.
pub fn conv2d(x: &Tensor, weight: &Tensor, dilation: usize) -> Tensor {
    let (b, ci, h, w) = x.dims4();
    let (co, wci, k, k2) = weight.dims4();
    assert_eq!(ci, wci, "conv2d: input has {ci} channels, weight expects {wci}");
    assert!(k == k2 && k % 2 == 1, "conv2d: kernel must be square and odd");
    let kd = ci * k * k;
    let hw = h * w;
    let mut out = vec![0.0f32; b * co * hw];
    let chunk = rows_per_chunk(kd, h, w);
    with_col_scratch(kd * chunk * w, |col| {
        for bi in 0..b {
            let xb = &x.data[bi * ci * hw..(bi + 1) * ci * hw];
            let ob = &mut out[bi * co * hw..(bi + 1) * co * hw];
            let mut y0 = 0;
            while y0 < h {
                let y1 = (y0 + chunk).min(h);
                let n = (y1 - y0) * w;
                im2col(xb, ci, h, w, k, dilation, y0, y1, &mut col[..kd * n]);
                gemm(
                    co,
                    kd,
                    n,
                    &weight.data,
                    (kd, 1),
                    &col[..kd * n],
                    (n, 1),
                    0.0,
                    &mut ob[y0 * w..],
                    (hw, 1),
                );
                y0 = y1;
            }
        }
    });
    Tensor::new(vec![b, co, h, w], out)
}

/// Gradient of `conv2d(x, w)` with respect to `w`, given the output gradient `g`.
/// Bilinear in `(x, g)`; sums over the batch.
pub fn conv2d_weight_grad(x: &Tensor, g: &Tensor, k: usize, dilation: usize) -> Tensor {
    let (b, ci, h, w) = x.dims4();
    let (gb, co, gh, gw) = g.dims4();
    assert_eq!((b, h, w), (gb, gh, gw), "conv2d_weight_grad: shape mismatch");
    let kd = ci * k * k;
    let hw = h * w;
    let mut out = vec![0.0f32; co * kd];
    let chunk = rows_per_chunk(kd, h, w);
    with_col_scratch(kd * chunk * w, |col| {
        let mut beta = 0.0;
        for bi in 0..b {
            let xb = &x.data[bi * ci * hw..(bi + 1) * ci * hw];
            let gbatch = &g.data[bi * co * hw..(bi + 1) * co * hw];
            let mut y0 = 0;
            while y0 < h {
                let y1 = (y0 + chunk).min(h);
                let n = (y1 - y0) * w;
                im2col(xb, ci, h, w, k, dilation, y0, y1, &mut col[..kd * n]);
                // out[co, kd] += g[co, n] * col[kd, n]^T
                gemm(
                    co,
                    n,
                    kd,
                    &gbatch[y0 * w..],
                    (hw, 1),
                    &col[..kd * n],
                    (1, n),
                    beta,
                    &mut out,
                    (kd, 1),
                );
                beta = 1.0;
                y0 = y1;
            }
        }
    });
    Tensor::new(vec![co, ci, k, k], out)
}

/// `w'[ci, co, i, j] = w[co, ci, k-1-i, k-1-j]`: turns a convolution into the
/// adjoint of its input map. Its own adjoint is itself.
pub fn flip_transpose(weight: &Tensor) -> Tensor {
    let (co, ci, k, k2) = weight.dims4();
    let mut out = vec![0.0f32; weight.numel()];
    for o in 0..co {
        for i in 0..ci {
            for a in 0..k {
                for b in 0..k2 {
                    out[((i * co + o) * k + a) * k2 + b] =
                        weight.data[((o * ci + i) * k + (k - 1 - a)) * k2 + (k2 - 1 - b)];
                }
            }
        }
    }
    Tensor::new(vec![ci, co, k, k2], out)
}

/// Sum over batch and spatial axes: `[b, c, h, w] -> [c]`.
pub fn channel_sum(x: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = vec![0.0f32; c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            let start = (bi * c + ci) * hw;
            *o += x.data[start..start + hw].iter().sum::<f32>();
        }
    }
    Tensor::new(vec![c], out)
}

/// Broadcast a per-channel vector `[c]` to `shape = [b, c, h, w]`.
pub fn channel_broadcast(v: &Tensor, shape: &[usize]) -> Tensor {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(
        v.numel(),
        c,
        "channel_broadcast: {} values for {c} channels",
        v.numel()
    );
    let hw = h * w;
    let mut out = Vec::with_capacity(b * c * hw);
    for _ in 0..b {
        for ci in 0..c {
            out.extend(std::iter::repeat_n(v.data[ci], hw));
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Interpolation table for one axis: `(i0, i1, frac)` per output index, corners aligned.
fn lerp_table(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    (0..output)
        .map(|o| {
            if output == 1 || input == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of the last two axes (corner-aligned). Leading axes are batched.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let nd = x.shape.len();
    assert!(nd >= 2);
    let (ih, iw) = (x.shape[nd - 2], x.shape[nd - 1]);
    let lead: usize = x.shape[..nd - 2].iter().product();
    let mut shape = x.shape.clone();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    if (ih, iw) == (oh, ow) {
        return Tensor::new(shape, x.data.clone());
    }
    let tw = lerp_table(iw, ow);
    let th = lerp_table(ih, oh);
    let mut tmp = vec![0.0f32; ih * ow];
    let mut out = vec![0.0f32; lead * oh * ow];
    for l in 0..lead {
        let src = &x.data[l * ih * iw..(l + 1) * ih * iw];
        for y in 0..ih {
            let row = &src[y * iw..(y + 1) * iw];
            for (o, &(i0, i1, a)) in tw.iter().enumerate() {
                let (v0, v1) = (row[i0], row[i1]);
                tmp[y * ow + o] = v0 + a * (v1 - v0);
            }
        }
        let dst = &mut out[l * oh * ow..(l + 1) * oh * ow];
        for (o, &(i0, i1, a)) in th.iter().enumerate() {
            for xw in 0..ow {
                let (v0, v1) = (tmp[i0 * ow + xw], tmp[i1 * ow + xw]);
                dst[o * ow + xw] = v0 + a * (v1 - v0);
            }
        }
    }
    Tensor::new(shape, out)
}

/// Adjoint of [`resize_bilinear`]: maps a gradient of shape `[.., oh, ow]` back to `[.., ih, iw]`.
pub fn resize_bilinear_adjoint(g: &Tensor, ih: usize, iw: usize) -> Tensor {
    let nd = g.shape.len();
    let (oh, ow) = (g.shape[nd - 2], g.shape[nd - 1]);
    let lead: usize = g.shape[..nd - 2].iter().product();
    let mut shape = g.shape.clone();
    shape[nd - 2] = ih;
    shape[nd - 1] = iw;
    if (ih, iw) == (oh, ow) {
        return Tensor::new(shape, g.data.clone());
    }
    let tw = lerp_table(iw, ow);
    let th = lerp_table(ih, oh);
    let mut tmp = vec![0.0f32; ih * ow];
    let mut out = vec![0.0f32; lead * ih * iw];
    for l in 0..lead {
        let src = &g.data[l * oh * ow..(l + 1) * oh * ow];
        tmp.fill(0.0);
        for (o, &(i0, i1, a)) in th.iter().enumerate() {
            for xw in 0..ow {
                let v = src[o * ow + xw];
                tmp[i0 * ow + xw] += v * (1.0 - a);
                tmp[i1 * ow + xw] += v * a;
            }
        }
        let dst = &mut out[l * ih * iw..(l + 1) * ih * iw];
        for y in 0..ih {
            for (o, &(i0, i1, a)) in tw.iter().enumerate() {
                let v = tmp[y * ow + o];
                dst[y * iw + i0] += v * (1.0 - a);
                dst[y * iw + i1] += v * a;
            }
        }
    }
    Tensor::new(shape, out)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Slice `len` entries starting at `start` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = axis_split(&x.shape, axis);
    assert!(start + len <= n, "narrow: {start}+{len} exceeds axis size {n}");
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Tensor::new(shape, out)
}

/// Zero-embed `x` at offset `start` of an axis of size `total` (adjoint of [`narrow`]).
pub fn pad_axis(x: &Tensor, axis: usize, start: usize, total: usize) -> Tensor {
    let (outer, len, inner) = axis_split(&x.shape, axis);
    assert!(start + len <= total);
    let mut out = vec![0.0f32; outer * total * inner];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&x.data[o * len * inner..(o + 1) * len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = total;
    Tensor::new(shape, out)
}
