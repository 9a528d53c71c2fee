//! Reference NCHW kernels. Accumulation order inside every output element is
//! fixed (input channel, then kernel row, then kernel column), so results
//! are bit-reproducible and independent of batch size.

use crate::error::Result;
use crate::tensor::{Layout, Tensor};

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c_in, h, wd) = dims4(x);
    let (c_out, _, k, _) = dims4(w);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    let xd = x.data();
    let wdt = w.data();
    let mut out = vec![0.0f32; n * c_out * oh * ow];
    // Each output element still sums its terms in (ic, ky, kx) order; the
    // loops are arranged so the innermost one runs along an output row.
    for (b, out_b) in out.chunks_mut(c_out * oh * ow).enumerate() {
        let x_b = &xd[b * c_in * h * wd..(b + 1) * c_in * h * wd];
        for (o, acc) in out_b.chunks_mut(oh * ow).enumerate() {
            let w_o = &wdt[o * c_in * k * k..(o + 1) * c_in * k * k];
            for i in 0..c_in {
                let x_i = &x_b[i * h * wd..(i + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w_o[(i * k + ky) * k + kx];
                        // Output columns whose tap lands inside the row.
                        let ox_lo = (padding.saturating_sub(kx)).div_ceil(stride);
                        if wd + padding <= kx {
                            continue;
                        }
                        let ox_hi = ((wd + padding - kx - 1) / stride + 1).min(ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo * stride + kx - padding;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &x_i[iy as usize * wd..(iy as usize + 1) * wd];
                            let acc_row = &mut acc[oy * ow + ox_lo..oy * ow + ox_hi];
                            if stride == 1 {
                                for (a, &xv) in acc_row.iter_mut().zip(&row[ix_lo..]) {
                                    *a += wv * xv;
                                }
                            } else {
                                for (a, &xv) in acc_row.iter_mut().zip(row[ix_lo..].iter().step_by(stride)) {
                                    *a += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bv) = bias {
                for a in acc.iter_mut() {
                    *a += bv[o];
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out, Layout::Nchw)
}

/// `x` is flattened per sample; output is `(N, out, 1, 1)`.
pub fn fully_connected(x: &Tensor, w: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let n = x.shape()[0];
    let features = x.len() / n;
    let out_f = w.shape()[0];
    let xd = x.data();
    let wd = w.data();
    let mut out = Vec::with_capacity(n * out_f);
    for b in 0..n {
        let row = &xd[b * features..(b + 1) * features];
        for o in 0..out_f {
            let w_o = &wd[o * features..(o + 1) * features];
            let mut acc = 0.0f32;
            for (wv, xv) in w_o.iter().zip(row) {
                acc += wv * xv;
            }
            out.push(match bias {
                Some(bv) => acc + bv[o],
                None => acc,
            });
        }
    }
    Tensor::new(vec![n, out_f, 1, 1], out, Layout::Nchw)
}

pub fn batch_norm(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f64,
) -> Result<Tensor> {
    let (_, c, h, w) = dims4(x);
    let plane = h * w;
    let inv: Vec<f32> = var
        .iter()
        .map(|&v| (1.0 / (v as f64 + eps).sqrt()) as f32)
        .collect();
    let out = x
        .data()
        .chunks(plane)
        .enumerate()
        .flat_map(|(i, p)| {
            let ch = i % c;
            let (m, s, g, b) = (mean[ch], inv[ch], gamma[ch], beta[ch]);
            p.iter().map(move |&v| (v - m) * s * g + b)
        })
        .collect();
    x.with_data(out)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.with_data(x.data().iter().map(|&v| v.max(0.0)).collect())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.with_data(a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

fn pool<F>(x: &Tensor, kernel: usize, stride: usize, reduce: F) -> Result<Tensor>
where
    F: Fn(&mut dyn Iterator<Item = f32>, usize) -> f32,
{
    let (n, c, h, w) = dims4(x);
    let (k_h, k_w, s) = if kernel == 0 { (h, w, 1) } else { (kernel, kernel, stride) };
    let oh = (h - k_h) / s + 1;
    let ow = (w - k_w) / s + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in xd.chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut window = (0..k_h).flat_map(|ky| {
                    let row = (oy * s + ky) * w + ox * s;
                    plane[row..row + k_w].iter().copied()
                });
                out.push(reduce(&mut window, k_h * k_w));
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out, Layout::Nchw)
}

pub fn max_pool(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    pool(x, kernel, stride, |it, _| it.fold(f32::NEG_INFINITY, f32::max))
}

/// `kernel == 0` averages over the whole plane.
pub fn avg_pool(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    pool(x, kernel, stride, |it, count| {
        let mut sum = 0.0f32;
        for v in it {
            sum += v;
        }
        sum / count as f32
    })
}
