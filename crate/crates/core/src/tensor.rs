//! Dense rank-4 tensors and the forward/adjoint kernels the models need.
//!
//! Layout is row-major `[n, c, h, w]` where axis 0 holds either the batch or
//! the time step. Every kernel here is a pure function of its arguments and
//! performs its reductions in a fixed order, so results are bit-reproducible.

use crate::error::{Error, Result};

pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

pub(crate) fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; numel(&shape)],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let mut data = Vec::with_capacity(numel(&shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Rank-4 tensor `[1, 1, 1, len]` holding `values`.
    pub fn vector(values: Vec<f32>) -> Self {
        Tensor {
            shape: [1, 1, 1, values.len()],
            data: values,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The scalar held by a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Plane stride: elements per `[c, h, w]` slice along axis 0.
    #[inline]
    pub fn slice_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// Slice `index` along axis 0 as a `[1, c, h, w]` tensor.
    pub fn slice0(&self, index: usize) -> Tensor {
        let len = self.slice_len();
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[index * len..(index + 1) * len].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

pub fn scale(x: &Tensor, s: f32) -> Tensor {
    x.map(|v| v * s)
}

/// Mean along `axis`; the reduced axis keeps extent 1.
pub fn reduce_mean(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis > 3 {
        return Err(Error::dim(format!("axis {axis} out of range 0..4")));
    }
    let n = x.shape[axis];
    if n == 0 {
        return Err(Error::dim(format!("axis {axis} has zero extent")));
    }
    let mut out_shape = x.shape;
    out_shape[axis] = 1;
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for k in 0..n {
            let src = &x.data[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let inv = 1.0 / n as f32;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data: out,
    })
}

/// Adjoint of [`reduce_mean`]: spreads `g / n` back over the reduced axis.
pub fn reduce_mean_backward(grad: &Tensor, in_shape: Shape, axis: usize) -> Tensor {
    let n = in_shape[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let inv = 1.0 / n as f32;
    let mut out = vec![0.0f32; numel(&in_shape)];
    for o in 0..outer {
        let src = &grad.data[o * inner..(o + 1) * inner];
        for k in 0..n {
            let dst = &mut out[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s * inv;
            }
        }
    }
    Tensor {
        shape: in_shape,
        data: out,
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(in_shape: Shape, k_shape: Shape, stride: usize, padding: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        let [_, c_in, h, w] = in_shape;
        let [c_out, kc, kh, kw] = k_shape;
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        Ok(ConvGeom {
            c_in,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h,
            w,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Rows of the unfolded input matrix.
    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Columns of the unfolded input matrix.
    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Multiply-accumulates per output plane set (one slice along axis 0).
    pub fn macs(&self) -> u64 {
        (self.c_out * self.p() * self.k()) as u64
    }
}

/// Valid output columns `[lo, hi)` for kernel column `kx` at stride 1.
#[inline]
fn valid_cols(kx: usize, g: &ConvGeom) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx).min(g.wo);
    let hi = (g.w + g.padding).saturating_sub(kx).min(g.wo).max(lo);
    (lo, hi)
}

/// Unfold `n` slices of `[c_in, h, w]` into a `[k, n * p]` column matrix.
fn im2col(src: &[f32], n: usize, g: &ConvGeom) -> Vec<f32> {
    let p = g.p();
    let np = n * p;
    let in_len = g.c_in * g.h * g.w;
    let pad = g.padding as isize;
    let mut col = vec![0.0f32; g.k() * np];
    for b in 0..n {
        let img = &src[b * in_len..(b + 1) * in_len];
        for ci in 0..g.c_in {
            let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = ((ci * g.kh + ky) * g.kw + kx) * np + b * p;
                    let dst = &mut col[row..row + p];
                    let (lo, hi) = valid_cols(kx, g);
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let in_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            if hi > lo {
                                let off = lo + kx - g.padding;
                                out_row[lo..hi].copy_from_slice(&in_row[off..off + hi - lo]);
                            }
                        } else {
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - pad;
                                if ix >= 0 && ix < g.w as isize {
                                    *o = in_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold a `[k, n * p]` column gradient back onto `n` slices of `[c_in, h, w]`.
fn col2im(col: &[f32], n: usize, g: &ConvGeom, dst: &mut [f32]) {
    let p = g.p();
    let np = n * p;
    let in_len = g.c_in * g.h * g.w;
    let pad = g.padding as isize;
    for b in 0..n {
        let img = &mut dst[b * in_len..(b + 1) * in_len];
        for ci in 0..g.c_in {
            let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = ((ci * g.kh + ky) * g.kw + kx) * np + b * p;
                    let src = &col[row..row + p];
                    let (lo, hi) = valid_cols(kx, g);
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let in_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let s_row = &src[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            if hi > lo {
                                let off = lo + kx - g.padding;
                                for (d, s) in
                                    in_row[off..off + hi - lo].iter_mut().zip(&s_row[lo..hi])
                                {
                                    *d += s;
                                }
                            }
                        } else {
                            for (ox, s) in s_row.iter().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - pad;
                                if ix >= 0 && ix < g.w as isize {
                                    in_row[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with a fixed eight-lane accumulation order.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Column block width for the unfolded matrix products.
const COL_BLOCK: usize = 256;

/// Unfolded input of a convolution, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCols {
    geom: ConvGeom,
    n: usize,
    cols: Vec<f32>,
}

/// Cross-correlation of `input [n, c_in, h, w]` with `kernel [c_out, c_in, kh, kw]`.
///
/// Each output element is accumulated over `(c_in, ky, kx)` in row-major order
/// starting from zero, and the bias is added last.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv2d_cols(input, kernel, bias, stride, padding).map(|(t, _)| t)
}

/// [`conv2d`] that also returns the unfolded input for [`conv2d_backward_cols`].
pub fn conv2d_cols(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, ConvCols)> {
    let g = ConvGeom::new(input.shape, kernel.shape, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::dim(format!(
                "conv2d: bias has {} entries for {} output channels",
                b.len(),
                g.c_out
            )));
        }
    }
    let n = input.shape[0];
    let (k, p) = (g.k(), g.p());
    let np = n * p;
    let col = im2col(&input.data, n, &g);
    let mut mat = vec![0.0f32; g.c_out * np];
    for start in (0..np).step_by(COL_BLOCK) {
        let end = (start + COL_BLOCK).min(np);
        for co in 0..g.c_out {
            let row = &mut mat[co * np + start..co * np + end];
            let wrow = &kernel.data[co * k..(co + 1) * k];
            for (kk, &wv) in wrow.iter().enumerate() {
                axpy(wv, &col[kk * np + start..kk * np + end], row);
            }
        }
    }
    let mut out = vec![0.0f32; np * g.c_out];
    for b in 0..n {
        for co in 0..g.c_out {
            let dst = &mut out[(b * g.c_out + co) * p..(b * g.c_out + co + 1) * p];
            dst.copy_from_slice(&mat[co * np + b * p..co * np + (b + 1) * p]);
            if let Some(bias) = bias {
                let bv = bias[co];
                for o in dst.iter_mut() {
                    *o += bv;
                }
            }
        }
    }
    Ok((
        Tensor::new([n, g.c_out, g.ho, g.wo], out)?,
        ConvCols {
            geom: g,
            n,
            cols: col,
        },
    ))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Vec<f32>,
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeom::new(input.shape, kernel.shape, stride, padding)?;
    let n = input.shape[0];
    let cols = ConvCols {
        geom: g,
        n,
        cols: im2col(&input.data, n, &g),
    };
    conv2d_backward_cols(&cols, kernel, grad_out, need_input)
}

pub fn conv2d_backward_cols(
    cols: &ConvCols,
    kernel: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = cols.geom;
    let n = cols.n;
    if grad_out.shape != [n, g.c_out, g.ho, g.wo] || kernel.shape != [g.c_out, g.c_in, g.kh, g.kw] {
        return Err(Error::dim(format!(
            "conv2d backward: gradient shape {:?} does not match output",
            grad_out.shape
        )));
    }
    let (k, p) = (g.k(), g.p());
    let np = n * p;
    let col = &cols.cols;
    // [c_out, n * p] view of the upstream gradient
    let mut gmat = vec![0.0f32; g.c_out * np];
    for b in 0..n {
        for co in 0..g.c_out {
            gmat[co * np + b * p..co * np + (b + 1) * p].copy_from_slice(
                &grad_out.data[(b * g.c_out + co) * p..(b * g.c_out + co + 1) * p],
            );
        }
    }
    let mut gk = vec![0.0f32; g.c_out * k];
    let gb: Vec<f32> = (0..g.c_out)
        .map(|co| gmat[co * np..(co + 1) * np].iter().sum())
        .collect();
    for co in 0..g.c_out {
        let grow = &gmat[co * np..(co + 1) * np];
        for kk in 0..k {
            gk[co * k + kk] = dot(grow, &col[kk * np..(kk + 1) * np]);
        }
    }
    let gin = if need_input {
        let mut gcol = vec![0.0f32; k * np];
        for start in (0..np).step_by(COL_BLOCK) {
            let end = (start + COL_BLOCK).min(np);
            for co in 0..g.c_out {
                let grow = &gmat[co * np + start..co * np + end];
                let wrow = &kernel.data[co * k..(co + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    if wv != 0.0 {
                        axpy(wv, grow, &mut gcol[kk * np + start..kk * np + end]);
                    }
                }
            }
        }
        let mut gin = vec![0.0f32; n * g.c_in * g.h * g.w];
        col2im(&gcol, n, &g, &mut gin);
        Some(Tensor::new([n, g.c_in, g.h, g.w], gin)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: gin,
        kernel: Tensor::new(kernel.shape, gk)?,
        bias: gb,
    })
}

/// Source index pair and weight for align-corners=false linear sampling.
#[inline]
fn linear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f32 / out_len as f32;
    let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == in_len - 1 {
        0.0
    } else {
        src - i0 as f32
    };
    (i0, i1, frac)
}

/// Bilinear resize with align-corners=false (half-pixel centres, edge clamp).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_resize: target extents must be >= 1"));
    }
    let [n, c, h, w] = x.shape;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let ys: Vec<_> = (0..out_h).map(|i| linear_taps(i, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|i| linear_taps(i, w, out_w)).collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data.chunks_exact(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward(grad: &Tensor, in_shape: Shape) -> Tensor {
    let [_, _, h, w] = in_shape;
    let [_, _, out_h, out_w] = grad.shape;
    if h == out_h && w == out_w {
        return grad.clone();
    }
    let ys: Vec<_> = (0..out_h).map(|i| linear_taps(i, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|i| linear_taps(i, w, out_w)).collect();
    let mut out = vec![0.0f32; numel(&in_shape)];
    for (gplane, plane) in grad
        .data
        .chunks_exact(out_h * out_w)
        .zip(out.chunks_exact_mut(h * w))
    {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let gv = gplane[oy * out_w + ox];
                let top = gv * (1.0 - fy);
                let bot = gv * fy;
                plane[y0 * w + x0] += top * (1.0 - fx);
                plane[y0 * w + x1] += top * fx;
                plane[y1 * w + x0] += bot * (1.0 - fx);
                plane[y1 * w + x1] += bot * fx;
            }
        }
    }
    Tensor {
        shape: in_shape,
        data: out,
    }
}

/// Input channel feeding slot `j` of group `g` when pooling `c` channels to `c_out`.
///
/// When `c_out` does not divide `c`, the last input channel is repeated to pad
/// `c` up to the next multiple of `c_out`.
fn pool_source(g: usize, j: usize, group: usize, c: usize) -> usize {
    (g * group + j).min(c - 1)
}

fn pool_group(c: usize, c_out: usize) -> usize {
    c.div_ceil(c_out)
}

/// Average contiguous channel groups down to `c_out` channels.
pub fn channel_avg_pool(x: &Tensor, c_out: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape;
    if c_out == 0 || c_out > c {
        return Err(Error::dim(format!(
            "channel_avg_pool: cannot pool {c} channels to {c_out}"
        )));
    }
    if c_out == c {
        return Ok(x.clone());
    }
    let group = pool_group(c, c_out);
    let hw = h * w;
    let inv = 1.0 / group as f32;
    let mut out = vec![0.0f32; n * c_out * hw];
    for b in 0..n {
        for g in 0..c_out {
            let dst = &mut out[(b * c_out + g) * hw..(b * c_out + g + 1) * hw];
            for j in 0..group {
                let src_c = pool_source(g, j, group, c);
                let src = &x.data[(b * c + src_c) * hw..(b * c + src_c + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
    }
    Tensor::new([n, c_out, h, w], out)
}

/// Adjoint of [`channel_avg_pool`].
pub fn channel_avg_pool_backward(grad: &Tensor, in_shape: Shape) -> Tensor {
    let [n, c, h, w] = in_shape;
    let c_out = grad.shape[1];
    if c_out == c {
        return grad.clone();
    }
    let group = pool_group(c, c_out);
    let hw = h * w;
    let inv = 1.0 / group as f32;
    let mut out = vec![0.0f32; numel(&in_shape)];
    for b in 0..n {
        for g in 0..c_out {
            let src = &grad.data[(b * c_out + g) * hw..(b * c_out + g + 1) * hw];
            for j in 0..group {
                let dst_c = pool_source(g, j, group, c);
                let dst = &mut out[(b * c + dst_c) * hw..(b * c + dst_c + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * inv;
                }
            }
        }
    }
    Tensor {
        shape: in_shape,
        data: out,
    }
}

/// Mirror `x` horizontally (`axis = 3`) or vertically (`axis = 2`).
pub fn flip(x: &Tensor, axis: usize) -> Tensor {
    let [_, _, h, w] = x.shape;
    let mut out = x.data.clone();
    for (src, dst) in x.data.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let (sy, sx) = if axis == 2 {
                    (h - 1 - y, xx)
                } else {
                    (y, w - 1 - xx)
                };
                dst[y * w + xx] = src[sy * w + sx];
            }
        }
    }
    Tensor {
        shape: x.shape,
        data: out,
    }
}

/// Stack `[1, c, h, w]` tensors along axis 0.
pub fn stack0(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("stack0: no tensors"))?;
    let [_, c, h, w] = first.shape;
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for p in parts {
        if p.shape != [1, c, h, w] {
            return Err(Error::dim(format!(
                "stack0: expected [1, {c}, {h}, {w}], got {:?}",
                p.shape
            )));
        }
        data.extend_from_slice(&p.data);
    }
    Tensor::new([parts.len(), c, h, w], data)
}
