//! Deliberately plain loop implementations used as oracles for the graph
//! versions. Nothing here is fast; everything is written index by index.

#![allow(clippy::needless_range_loop)]

use crate::generator::AttentionNorm;
use crate::numerics::Tensor;

/// Channel-reweighted spatial attention computed with explicit loops.
pub fn crsa_naive(f: &Tensor, w_r: &Tensor, b_r: &Tensor, norm: AttentionNorm) -> Tensor {
    let (h, w, c) = f.hwc().expect("crsa_naive wants [h, w, C]");
    let hw = h * w;
    let x = f.data();
    let at = |p: usize, ch: usize| x[p * c + ch];

    let mut pooled = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for p in 0..hw {
            s += at(p, ch);
        }
        pooled[ch] = s / hw as f64;
    }

    let mut r = vec![vec![0.0; c]; hw];
    for p in 0..hw {
        for o in 0..c {
            let mut s = b_r.data()[o];
            for i in 0..c {
                s += at(p, i) * w_r.data()[i * c + o];
            }
            r[p][o] = s;
        }
    }

    let mut g1 = vec![vec![0.0; c]; hw];
    for p in 0..hw {
        for ch in 0..c {
            g1[p][ch] = r[p][ch] * pooled[ch];
        }
    }

    let mut a = vec![vec![0.0; hw]; hw];
    for p in 0..hw {
        for q in 0..hw {
            let mut s = 0.0;
            for ch in 0..c {
                s += r[p][ch] * g1[q][ch];
            }
            a[p][q] = s;
        }
    }
    match norm {
        AttentionNorm::Scaled => {
            for row in &mut a {
                for v in row.iter_mut() {
                    *v /= (hw * c) as f64;
                }
            }
        }
        AttentionNorm::Softmax => {
            let t = (c as f64).sqrt();
            for row in &mut a {
                let m = row.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v / t - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
    }

    let mut out = vec![0.0; hw * c];
    for p in 0..hw {
        for ch in 0..c {
            let mut s = 0.0;
            for q in 0..hw {
                s += a[p][q] * at(q, ch);
            }
            out[p * c + ch] = s;
        }
    }
    Tensor::new(vec![h, w, c], out).expect("shape")
}

/// Zero-padded 2D convolution, weights `[k, k, Cin, Cout]`, with bias.
pub fn conv2d_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (h, wd, cin) = x.hwc().expect("conv2d_naive wants [H, W, C]");
    let k = w.shape()[0];
    let cout = w.shape()[3];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..cout {
                let mut s = b.data()[o];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for i in 0..cin {
                            let xv = x.data()[(iy as usize * wd + ix as usize) * cin + i];
                            s += xv * w.data()[((ky * k + kx) * cin + i) * cout + o];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + o] = s;
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out).expect("shape")
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Stage features of a stride-2 conv + SiLU pyramid.
pub fn pyramid_naive(img: &Tensor, stages: &[(Tensor, Tensor)]) -> Vec<Tensor> {
    let mut feats = Vec::with_capacity(stages.len());
    let mut x = img.clone();
    for (w, b) in stages {
        x = conv2d_naive(&x, w, b, 2, 1).map(silu);
        feats.push(x.clone());
    }
    feats
}

/// Sum over stages of the per-element mean squared feature difference.
pub fn content_loss_naive(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for (fa, fb) in a.iter().zip(b) {
        let mut s = 0.0;
        for i in 0..fa.numel() {
            let d = fa.data()[i] - fb.data()[i];
            s += d * d;
        }
        total += s / fa.numel() as f64;
    }
    total
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `log(clamp(p, eps, 1 - eps))`.
fn clamped_log(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps).ln()
}

fn mean_over<F: Fn(f64) -> f64>(map: &Tensor, f: F) -> f64 {
    let mut s = 0.0;
    for &v in map.data() {
        s += f(v);
    }
    s / map.numel() as f64
}

pub fn disc_loss_naive(real: &[Tensor], fake: &[Tensor], eps: f64) -> f64 {
    let m = real.len() as f64;
    let mut total = 0.0;
    for (r, f) in real.iter().zip(fake) {
        total += mean_over(r, |v| clamped_log(sigmoid(v), eps));
        total += mean_over(f, |v| clamped_log(1.0 - sigmoid(v), eps));
    }
    -total / m
}

pub fn gen_loss_saturating_naive(fake: &[Tensor], eps: f64) -> f64 {
    let mut total = 0.0;
    for f in fake {
        total += mean_over(f, |v| clamped_log(1.0 - sigmoid(v), eps));
    }
    total / fake.len() as f64
}

pub fn gen_loss_nonsaturating_naive(fake: &[Tensor], eps: f64) -> f64 {
    let mut total = 0.0;
    for f in fake {
        total += mean_over(f, |v| clamped_log(sigmoid(v), eps));
    }
    -total / fake.len() as f64
}
