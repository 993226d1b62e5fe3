//! Forward/backward kernels on raw buffers. Image tensors are `[N, C, H, W]`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects [N,C,H,W] input and [Co,Ci,kh,kw] kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Shape("conv2d stride and dilation must be >= 1".into()));
        }
        let (batch, in_channels, in_h, in_w) = (input[0], input[1], input[2], input[3]);
        let (out_channels, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != in_channels {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {in_channels}, kernel expects {kc}"
            )));
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if span_h > in_h + 2 * padding || span_w > in_w + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d kernel span {span_h}x{span_w} exceeds padded input {}x{}",
                in_h + 2 * padding,
                in_w + 2 * padding
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            dilation,
            padding,
            out_h: (in_h + 2 * padding - span_h) / stride + 1,
            out_w: (in_w + 2 * padding - span_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Output index range `[lo, hi)` along one axis whose input tap at offset `k` is in bounds.
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let shift = (k * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // need 0 <= o*s + shift < in_len
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi_incl = (in_len as isize - 1 - shift).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_len as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

/// Cross-correlation, no kernel flip.
pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let o = &mut out[(n * g.out_channels + co) * out_plane..][..out_plane];
            for ci in 0..g.in_channels {
                let x = &input[(n * g.in_channels + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                    for kx in 0..g.kw {
                        let w = kernel[((co * g.in_channels + ci) * g.kh + ky) * g.kw + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky * g.dilation - g.padding;
                            let orow = &mut o[oy * g.out_w..][..g.out_w];
                            let xrow = &x[iy * g.in_w..][..g.in_w];
                            let base = kx * g.dilation;
                            for ox in ox0..ox1 {
                                orow[ox] += w * xrow[ox * g.stride + base - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_kernel).
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gi = need_input.then(|| vec![0.0; input.len()]);
    let mut gk = need_kernel.then(|| vec![0.0; kernel.len()]);
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let go = &grad_out[(n * g.out_channels + co) * out_plane..][..out_plane];
            for ci in 0..g.in_channels {
                let x_off = (n * g.in_channels + ci) * in_plane;
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                    for kx in 0..g.kw {
                        let kidx = ((co * g.in_channels + ci) * g.kh + ky) * g.kw + kx;
                        let w = kernel[kidx];
                        let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                        let base = kx * g.dilation;
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky * g.dilation - g.padding;
                            let grow = &go[oy * g.out_w..][..g.out_w];
                            let row_off = x_off + iy * g.in_w;
                            if need_kernel {
                                let xrow = &input[row_off..][..g.in_w];
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * g.stride + base - g.padding];
                                }
                            }
                            if let Some(gi) = gi.as_mut() {
                                if w != 0.0 {
                                    let irow = &mut gi[row_off..][..g.in_w];
                                    for ox in ox0..ox1 {
                                        irow[ox * g.stride + base - g.padding] += w * grow[ox];
                                    }
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gi, gk)
}

/// Max-shifted log-sum-exp pooling over each `plane`-sized block.
/// `(1/r) * log(mean(exp(r * x)))`.
pub fn lse_pool_forward(x: &[f64], plane: usize, r: f64) -> Vec<f64> {
    x.chunks(plane)
        .map(|p| {
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = p.iter().map(|&v| (r * (v - m)).exp()).sum();
            m + (s / plane as f64).ln() / r
        })
        .collect()
}

/// d pooled / d x is the softmax of `r * x` within the plane.
pub fn lse_pool_backward(x: &[f64], plane: usize, r: f64, grad_out: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; x.len()];
    for (b, (p, gp)) in x.chunks(plane).zip(gx.chunks_mut(plane)).enumerate() {
        let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = p.iter().map(|&v| (r * (v - m)).exp()).sum();
        for (gv, &v) in gp.iter_mut().zip(p) {
            *gv = grad_out[b] * (r * (v - m)).exp() / s;
        }
    }
    gx
}

/// Per-axis interpolation taps for half-pixel-centre (align_corners = false) resampling.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

pub fn bilinear_forward(x: &[f64], planes: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let ty = AxisTaps::new(h, th);
    let tx = AxisTaps::new(w, tw);
    let mut out = vec![0.0; planes * th * tw];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * th * tw..][..th * tw];
        for oy in 0..th {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..tw {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * tw + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward(
    grad_out: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<f64> {
    let ty = AxisTaps::new(h, th);
    let tx = AxisTaps::new(w, tw);
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * th * tw..][..th * tw];
        let gs = &mut gx[p * h * w..][..h * w];
        for oy in 0..th {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..tw {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let g = go[oy * tw + ox];
                gs[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gs[y0 * w + x1] += g * (1.0 - fy) * fx;
                gs[y1 * w + x0] += g * fy * (1.0 - fx);
                gs[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    gx
}

/// First-index argmin / argmax of a slice.
pub fn arg_extrema(p: &[f64]) -> (usize, usize) {
    let mut amin = 0;
    let mut amax = 0;
    for (i, &v) in p.iter().enumerate() {
        if v < p[amin] {
            amin = i;
        }
        if v > p[amax] {
            amax = i;
        }
    }
    (amin, amax)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
