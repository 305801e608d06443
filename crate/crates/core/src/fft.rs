//! Real 2-D discrete Fourier transform and its adjoint.
//!
//! Power-of-two lengths go through an iterative radix-2 FFT; other lengths fall
//! back to the direct O(n^2) sum. Arithmetic is carried out in `f64` and the
//! spectrum is stored as `f32`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Half spectrum of a real `[n, c, h, w]` tensor: `[n, c, h, w / 2 + 1]` bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub shape: Shape,
    pub re: Vec<f32>,
    pub im: Vec<f32>,
}

impl Spectrum {
    pub fn bins(&self) -> usize {
        self.re.len()
    }

    /// Re/Im interleaved along the last axis: `[n, c, h, 2 * (w / 2 + 1)]`.
    pub fn interleaved(&self) -> Tensor {
        let [n, c, h, wh] = self.shape;
        let mut data = Vec::with_capacity(self.re.len() * 2);
        for (r, i) in self.re.iter().zip(&self.im) {
            data.push(*r);
            data.push(*i);
        }
        Tensor::new([n, c, h, 2 * wh], data).expect("interleaved spectrum shape")
    }
}

fn bit_reverse_permute(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
}

/// In-place complex DFT. `sign = -1.0` is the forward transform, `+1.0` the
/// unnormalised inverse.
fn dft1(re: &mut [f64], im: &mut [f64], sign: f64, scratch: &mut Vec<(f64, f64)>) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        bit_reverse_permute(re, im);
        let mut len = 2;
        while len <= n {
            let ang = sign * 2.0 * PI / len as f64;
            let half = len / 2;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (ws, wc) = (ang * k as f64).sin_cos();
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wc - im[b] * ws;
                    let ti = re[b] * ws + im[b] * wc;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    } else {
        scratch.clear();
        for k in 0..n {
            let mut sr = 0.0;
            let mut si = 0.0;
            for j in 0..n {
                let ang = sign * 2.0 * PI * ((k * j) % n) as f64 / n as f64;
                let (s, c) = ang.sin_cos();
                sr += re[j] * c - im[j] * s;
                si += re[j] * s + im[j] * c;
            }
            scratch.push((sr, si));
        }
        for (k, &(sr, si)) in scratch.iter().enumerate() {
            re[k] = sr;
            im[k] = si;
        }
    }
}

/// Real-input 2-D DFT per `(n, c)` plane, keeping `w / 2 + 1` columns.
pub fn rdft2(x: &Tensor) -> Result<Spectrum> {
    let [n, c, h, w] = x.shape();
    if h == 0 || w == 0 {
        return Err(Error::dim("rdft2: spatial extents must be >= 1"));
    }
    let wh = w / 2 + 1;
    let mut re_out = Vec::with_capacity(n * c * h * wh);
    let mut im_out = Vec::with_capacity(n * c * h * wh);
    let mut scratch = Vec::new();
    let mut row_re = vec![0.0f64; w];
    let mut row_im = vec![0.0f64; w];
    let mut col_re = vec![0.0f64; h];
    let mut col_im = vec![0.0f64; h];
    let mut plane_re = vec![0.0f64; h * wh];
    let mut plane_im = vec![0.0f64; h * wh];
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..h {
            for (dst, &v) in row_re.iter_mut().zip(&plane[y * w..(y + 1) * w]) {
                *dst = v as f64;
            }
            row_im.fill(0.0);
            dft1(&mut row_re, &mut row_im, -1.0, &mut scratch);
            plane_re[y * wh..(y + 1) * wh].copy_from_slice(&row_re[..wh]);
            plane_im[y * wh..(y + 1) * wh].copy_from_slice(&row_im[..wh]);
        }
        for k in 0..wh {
            for y in 0..h {
                col_re[y] = plane_re[y * wh + k];
                col_im[y] = plane_im[y * wh + k];
            }
            dft1(&mut col_re, &mut col_im, -1.0, &mut scratch);
            for y in 0..h {
                plane_re[y * wh + k] = col_re[y];
                plane_im[y * wh + k] = col_im[y];
            }
        }
        re_out.extend(plane_re.iter().map(|&v| v as f32));
        im_out.extend(plane_im.iter().map(|&v| v as f32));
    }
    Ok(Spectrum {
        shape: [n, c, h, wh],
        re: re_out,
        im: im_out,
    })
}

/// Adjoint of [`rdft2`]: maps gradients w.r.t. the real and imaginary parts of
/// each half-spectrum bin back to a gradient w.r.t. the real input of width `w`.
pub fn rdft2_adjoint(grad_re: &[f32], grad_im: &[f32], shape: Shape, w: usize) -> Result<Tensor> {
    let [n, c, h, wh] = shape;
    if wh != w / 2 + 1 || grad_re.len() != n * c * h * wh || grad_im.len() != grad_re.len() {
        return Err(Error::dim(format!(
            "rdft2 adjoint: spectrum shape {shape:?} inconsistent with width {w}"
        )));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    let mut scratch = Vec::new();
    let mut col_re = vec![0.0f64; h];
    let mut col_im = vec![0.0f64; h];
    let mut row_re = vec![0.0f64; w];
    let mut row_im = vec![0.0f64; w];
    let mut plane_re = vec![0.0f64; h * wh];
    let mut plane_im = vec![0.0f64; h * wh];
    for (gre, gim) in grad_re
        .chunks_exact(h * wh)
        .zip(grad_im.chunks_exact(h * wh))
    {
        for k in 0..wh {
            for y in 0..h {
                col_re[y] = gre[y * wh + k] as f64;
                col_im[y] = gim[y * wh + k] as f64;
            }
            dft1(&mut col_re, &mut col_im, 1.0, &mut scratch);
            for y in 0..h {
                plane_re[y * wh + k] = col_re[y];
                plane_im[y * wh + k] = col_im[y];
            }
        }
        for y in 0..h {
            row_re.fill(0.0);
            row_im.fill(0.0);
            row_re[..wh].copy_from_slice(&plane_re[y * wh..(y + 1) * wh]);
            row_im[..wh].copy_from_slice(&plane_im[y * wh..(y + 1) * wh]);
            dft1(&mut row_re, &mut row_im, 1.0, &mut scratch);
            out.extend(row_re.iter().map(|&v| v as f32));
        }
    }
    Tensor::new([n, c, h, w], out)
}
