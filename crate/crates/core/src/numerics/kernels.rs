//! Slice-level forward and backward kernels behind the tape operations.
//!
//! All image buffers are `[H][W][C]` row-major.

/// Geometry of a square-kernel 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extents, or `None` when the kernel does not fit.
    pub fn output_extent(&self) -> Option<(usize, usize)> {
        let span_h = self.height + 2 * self.pad;
        let span_w = self.width + 2 * self.pad;
        if span_h < self.kernel || span_w < self.kernel || self.stride == 0 {
            return None;
        }
        Some((
            (span_h - self.kernel) / self.stride + 1,
            (span_w - self.kernel) / self.stride + 1,
        ))
    }

    #[inline]
    fn source(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T` for a row-major `rows x cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Weights are `[k][k][C_in][C_out]`.
pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.output_extent().expect("conv geometry checked by caller");
    let (cin, cout, k) = (g.in_channels, g.out_channels, g.kernel);
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let o_off = (oy * wo + ox) * cout;
            for ky in 0..k {
                let Some(iy) = g.source(oy, ky, g.height) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.source(ox, kx, g.width) else { continue };
                    let x_off = (iy * g.width + ix) * cin;
                    let w_off = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[x_off + ci];
                        let wrow = &w[w_off + ci * cout..w_off + (ci + 1) * cout];
                        let orow = &mut out[o_off..o_off + cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w)`.
pub fn conv2d_backward(x: &[f64], w: &[f64], gy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.output_extent().expect("conv geometry checked by caller");
    let (cin, cout, k) = (g.in_channels, g.out_channels, g.kernel);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for oy in 0..ho {
        for ox in 0..wo {
            let grow = &gy[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
            for ky in 0..k {
                let Some(iy) = g.source(oy, ky, g.height) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.source(ox, kx, g.width) else { continue };
                    let x_off = (iy * g.width + ix) * cin;
                    let w_off = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let span = w_off + ci * cout..w_off + (ci + 1) * cout;
                        let wrow = &w[span.clone()];
                        let mut acc = 0.0;
                        for (&gv, &wv) in grow.iter().zip(wrow) {
                            acc += gv * wv;
                        }
                        gx[x_off + ci] += acc;
                        let xv = x[x_off + ci];
                        for (gwv, &gv) in gw[span].iter_mut().zip(grow) {
                            *gwv += xv * gv;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Same-padded per-channel convolution; kernels are `[k][k][C]`.
pub fn depthwise(x: &[f64], kern: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let o_off = (y * w + xx) * c;
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = xx as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let x_off = (iy as usize * w + ix as usize) * c;
                    let k_off = (ky * k + kx) * c;
                    for ch in 0..c {
                        out[o_off + ch] += x[x_off + ch] * kern[k_off + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    x: &[f64],
    kern: &[f64],
    gy: &[f64],
    h: usize,
    w: usize,
    c: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = (k / 2) as isize;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kern.len()];
    for y in 0..h {
        for xx in 0..w {
            let o_off = (y * w + xx) * c;
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = xx as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let x_off = (iy as usize * w + ix as usize) * c;
                    let k_off = (ky * k + kx) * c;
                    for ch in 0..c {
                        gx[x_off + ch] += gy[o_off + ch] * kern[k_off + ch];
                        gk[k_off + ch] += gy[o_off + ch] * x[x_off + ch];
                    }
                }
            }
        }
    }
    (gx, gk)
}

pub fn upsample2x(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..ho {
        for xx in 0..wo {
            let src = ((y / 2) * w + xx / 2) * c;
            let dst = (y * wo + xx) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

pub fn upsample2x_backward(gy: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let wo = 2 * w;
    let mut gx = vec![0.0; h * w * c];
    for y in 0..2 * h {
        for xx in 0..wo {
            let src = (y * wo + xx) * c;
            let dst = ((y / 2) * w + xx / 2) * c;
            for ch in 0..c {
                gx[dst + ch] += gy[src + ch];
            }
        }
    }
    gx
}

/// `factor x factor` average pooling. Windows that run past a ragged edge
/// average only the cells they cover.
pub fn avg_pool(x: &[f64], h: usize, w: usize, c: usize, factor: usize) -> Vec<f64> {
    let (ho, wo) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = vec![0.0; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let ys = oy * factor..((oy + 1) * factor).min(h);
            let xs = ox * factor..((ox + 1) * factor).min(w);
            let count = (ys.len() * xs.len()) as f64;
            let dst = (oy * wo + ox) * c;
            for y in ys {
                for xx in xs.clone() {
                    let src = (y * w + xx) * c;
                    for ch in 0..c {
                        out[dst + ch] += x[src + ch];
                    }
                }
            }
            for v in &mut out[dst..dst + c] {
                *v /= count;
            }
        }
    }
    out
}

pub fn avg_pool_backward(gy: &[f64], h: usize, w: usize, c: usize, factor: usize) -> Vec<f64> {
    let wo = w.div_ceil(factor);
    let mut gx = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let (oy, ox) = (y / factor, xx / factor);
            let rows = ((oy + 1) * factor).min(h) - oy * factor;
            let cols = ((ox + 1) * factor).min(w) - ox * factor;
            let count = (rows * cols) as f64;
            let src = (oy * wo + ox) * c;
            let dst = (y * w + xx) * c;
            for ch in 0..c {
                gx[dst + ch] = gy[src + ch] / count;
            }
        }
    }
    gx
}
