//! Dense `f64` tensors, reverse-mode autodiff, and the few image kernels the model needs.

pub mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Lifts a `[C,H,W]` tensor to `[1,C,H,W]`; returns whether it was lifted.
fn as_batched(t: &Tensor) -> Result<(Tensor, bool)> {
    match t.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            Ok((t.clone().reshape(&s)?, true))
        }
        4 => Ok((t.clone(), false)),
        r => Err(Error::Shape(format!("expected rank 3 or 4 image tensor, got rank {r}"))),
    }
}

fn unbatch(t: Tensor, lifted: bool) -> Result<Tensor> {
    if lifted {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    } else {
        Ok(t)
    }
}

/// Cross-correlation of a `[C_in,H,W]` (or batched `[N,C_in,H,W]`) input with a
/// `[C_out,C_in,kh,kw]` kernel.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<Tensor> {
    let (x, lifted) = as_batched(input)?;
    let g = kernels::ConvGeometry::new(x.shape(), kernel.shape(), stride, dilation, padding)?;
    let out = Tensor::new(&g.output_shape(), kernels::conv2d_forward(&g, x.data(), kernel.data()))?;
    unbatch(out, lifted)
}

/// `[C,H,W] → [C]` (or `[N,C,H,W] → [N,C]`) log-sum-exp pooling.
pub fn lse_pool(features: &Tensor, r: f64) -> Result<Tensor> {
    let (x, lifted) = as_batched(features)?;
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let p = tape.lse_pool(v, r)?;
    let out = tape.value(p).clone();
    if lifted {
        let c = out.shape()[1];
        out.reshape(&[c])
    } else {
        Ok(out)
    }
}

/// Bilinear upsampling (half-pixel centres) of the trailing `[H,W]` axes.
pub fn bilinear_upsample(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Shape("upsample target extents must be positive".into()));
    }
    if map.rank() < 2 {
        return Err(Error::Shape("upsample needs at least 2 axes".into()));
    }
    let s = map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if th < h || tw < w {
        return Err(Error::Shape(format!(
            "upsample target {th}x{tw} smaller than source {h}x{w}"
        )));
    }
    let planes = map.len() / (h * w);
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend_from_slice(&[th, tw]);
    Tensor::new(&shape, kernels::bilinear_forward(map.data(), planes, h, w, th, tw))
}

/// Central finite differences of a scalar function at `x`.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    out
}

/// Denominator floor of [`max_relative_error`]; above the roundoff of central
/// differences at step 1e-6, so coordinates with a zero true gradient do not
/// report noise as relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `max_i |a_i - n_i| / (|a_i| + |n_i| + floor)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` at `x` against central differences and
/// returns the maximum relative error over coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut failure = None;
    let numeric = central_difference(
        |p| {
            let mut t = Tape::new();
            let v = t.constant(p.clone());
            match f(&mut t, v) {
                Ok(o) => t.value(o).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        x,
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(&analytic, &numeric))
}
