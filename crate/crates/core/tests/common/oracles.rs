//! Direct-formula references.

use std::f64::consts::PI;

use spikeir::tensor::Tensor;

/// Convolution by the defining sum: for each output, accumulate
/// `w * x` over input channel, kernel row, kernel column, then add the bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&[f32]>, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape();
    let [co, _, k, _] = w.shape();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn([n, co, oh, ow], |[bn, o, oy, ox]| {
        let mut acc = 0.0f32;
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    acc += w.at([o, c, ky, kx]) * x.at([bn, c, iy as usize, ix as usize]);
                }
            }
        }
        acc + b.map_or(0.0, |b| b[o])
    })
}

/// Full 2-D DFT of an `h x w` plane: `(re, im)` row-major over `(u, v)`.
pub fn dft2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    sr += plane[y * w + x] * ang.cos();
                    si += plane[y * w + x] * ang.sin();
                }
            }
            re[u * w + v] = sr;
            im[u * w + v] = si;
        }
    }
    (re, im)
}

pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        99.0
    } else {
        (-10.0 * mse.log10()).min(99.0)
    }
}

/// SSIM with an explicit 11x11 Gaussian (sigma 1.5) weighted sum at every
/// fully-inside window position, averaged over positions and planes.
pub fn ssim(a: &Tensor, b: &Tensor) -> f64 {
    let [n, c, h, w] = a.shape();
    let r = 5isize;
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut sum = 0.0;
    let mut count = 0usize;
    for bn in 0..n {
        for ch in 0..c {
            for cy in 5..h - 5 {
                for cx in 5..w - 5 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let wgt = g[(dy + r) as usize][(dx + r) as usize] / total;
                            let p = [
                                bn,
                                ch,
                                (cy as isize + dy) as usize,
                                (cx as isize + dx) as usize,
                            ];
                            let (x, y) = (a.at(p) as f64, b.at(p) as f64);
                            mx += wgt * x;
                            my += wgt * y;
                            xx += wgt * x * x;
                            yy += wgt * y * y;
                            xy += wgt * x * y;
                        }
                    }
                    let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    sum += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

/// Half-pixel-centred bilinear sampling with edge clamping, in f64.
pub fn bilinear(x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
    let [n, c, h, w] = x.shape();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, if i0 == inp - 1 { 0.0 } else { s - i0 as f64 })
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = coord(oy, oh, h);
                for ox in 0..ow {
                    let (x0, x1, fx) = coord(ox, ow, w);
                    let v = |y: usize, xx: usize| x.at([bn, ch, y, xx]) as f64;
                    out.push(
                        (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                            + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1)),
                    );
                }
            }
        }
    }
    out
}

/// Average of contiguous channel groups of size `ceil(c / c_out)`, with the
/// last channel repeated to fill a short final group.
pub fn channel_pool(x: &Tensor, c_out: usize) -> Vec<f64> {
    let [n, c, h, w] = x.shape();
    let g = c.div_ceil(c_out);
    let mut out = Vec::new();
    for bn in 0..n {
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let s: f64 = (0..g)
                        .map(|j| x.at([bn, (o * g + j).min(c - 1), y, xx]) as f64)
                        .sum();
                    out.push(s / g as f64);
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Gate tensor of the spiking attention for spikes `s` and membrane `v`:
/// `sigmoid(a * mean_t(v) + b) * sigmoid(cw_c * rate_c + cb_c) *
/// sigmoid(sum_c sw_c * mean_t(s) + sb)` broadcast to `[t, c, h, w]`.
pub fn attention_gates(
    s: &Tensor,
    v: &Tensor,
    time: [f32; 2],
    cw: &[f32],
    cb: &[f32],
    sw: &[f32],
    sb: f32,
) -> Vec<f64> {
    let [t, c, h, w] = s.shape();
    let mean_t = |k: usize| -> f64 {
        let mut acc = 0.0;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    acc += v.at([k, ch, y, x]) as f64;
                }
            }
        }
        acc / (c * h * w) as f64
    };
    let smean = |ch: usize, y: usize, x: usize| -> f64 {
        (0..t).map(|k| s.at([k, ch, y, x]) as f64).sum::<f64>() / t as f64
    };
    let rate = |ch: usize| -> f64 {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += smean(ch, y, x);
            }
        }
        acc / (h * w) as f64
    };
    let mut g = Vec::with_capacity(s.len());
    for k in 0..t {
        let gt = sigmoid(time[0] as f64 * mean_t(k) + time[1] as f64);
        for ch in 0..c {
            let gc = sigmoid(cw[ch] as f64 * rate(ch) + cb[ch] as f64);
            for y in 0..h {
                for x in 0..w {
                    let z: f64 =
                        (0..c).map(|q| sw[q] as f64 * smean(q, y, x)).sum::<f64>() + sb as f64;
                    g.push(gt * gc * sigmoid(z));
                }
            }
        }
    }
    g
}

/// Energy of one block written out by hand: `T * (fr * 0.9 * ac + 4.6 * mac)`.
pub fn block_energy(t: usize, fr: f64, ac: u64, mac: u64) -> f64 {
    t as f64 * (fr * 0.9 * ac as f64 + 4.6 * mac as f64)
}
