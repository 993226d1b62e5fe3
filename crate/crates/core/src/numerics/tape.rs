//! Reverse-mode automatic differentiation over a linear record of operations.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs to compute input gradients. `backward` walks the nodes once in
//! reverse order. A tape may only be differentiated once.

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    ChannelBias {
        x: Var,
        bias: Var,
    },
    RowBias {
        x: Var,
        bias: Var,
    },
    Linear {
        x: Var,
        weight: Var,
    },
    LsePool {
        x: Var,
        r: f64,
    },
    MeanPool(Var),
    SpatialSoftmax(Var),
    WeightedPool {
        features: Var,
        weights: Var,
    },
    ScaleChannels {
        x: Var,
        scales: Var,
    },
    AddMap {
        x: Var,
        map: Var,
    },
    ExpandChannels(Var),
    Concat(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    NormalizeMinMax {
        x: Var,
        argmin: Vec<usize>,
        argmax: Vec<usize>,
        range: Vec<f64>,
    },
    Minimum(Var, Var),
    MaxChannels {
        x: Var,
        argmax: Vec<usize>,
    },
    SumSpatial(Var),
    SumAll(Var),
    Upsample {
        x: Var,
        out_h: usize,
        out_w: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::RowBias { .. } => "row_bias",
            Op::Linear { .. } => "linear",
            Op::LsePool { .. } => "lse_pool",
            Op::MeanPool(..) => "mean_pool",
            Op::SpatialSoftmax(..) => "spatial_softmax",
            Op::WeightedPool { .. } => "weighted_pool",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::AddMap { .. } => "add_map",
            Op::ExpandChannels(..) => "expand_channels",
            Op::Concat(..) => "concat",
            Op::BatchNorm { .. } => "batch_norm",
            Op::NormalizeMinMax { .. } => "normalize_min_max",
            Op::Minimum(..) => "minimum",
            Op::MaxChannels { .. } => "max_channels",
            Op::SumSpatial(..) => "sum_spatial",
            Op::SumAll(..) => "sum_all",
            Op::Upsample { .. } => "upsample",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for running-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Minimum variance used by batch normalization.
pub const BN_VAR_FLOOR: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!("expected [N,C,H,W], got {:?}", t.shape()))),
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, c] => Ok((n, c)),
        _ => Err(Error::Shape(format!("expected [N,C], got {:?}", t.shape()))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the differentiated loss with respect to `v`, once `backward` has run.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; at ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x < 0.0 { 0.0 } else { x });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            dilation,
            padding,
        )?;
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(&geom.output_shape(), out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// Adds `bias[c]` to every position of channel `c`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::Shape(format!("bias length {} vs {c} channels", b.len())));
        }
        let plane = h * w;
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        debug_assert_eq!(value.len(), n * c * plane);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::ChannelBias { x, bias }, rg))
    }

    /// `[N,K] + bias[K]`.
    pub fn row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, k) = dims2(self.value(x))?;
        let b = self.value(bias);
        if b.len() != k {
            return Err(Error::Shape(format!("bias length {} vs {k} columns", b.len())));
        }
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::RowBias { x, bias }, rg))
    }

    /// `x[N,C] · weight[K,C]ᵀ → [N,K]`.
    pub fn linear(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (n, c) = dims2(self.value(x))?;
        let (k, wc) = dims2(self.value(weight))?;
        if wc != c {
            return Err(Error::Shape(format!("linear: input has {c} features, weight expects {wc}")));
        }
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                out[i * k + j] = (0..c).map(|t| xv[i * c + t] * wv[j * c + t]).sum();
            }
        }
        let rg = self.rg(&[x, weight]);
        Ok(self.push(Tensor::new(&[n, k], out)?, Op::Linear { x, weight }, rg))
    }

    /// `[N,C,H,W] → [N,C]` log-sum-exp pooling with sharpness `r`.
    pub fn lse_pool(&mut self, x: Var, r: f64) -> Result<Var> {
        if r.is_nan() || r <= 0.0 {
            return Err(Error::Config(format!("LSE sharpness must be > 0, got {r}")));
        }
        let (n, c, h, w) = dims4(self.value(x))?;
        let out = kernels::lse_pool_forward(self.value(x).data(), h * w, r);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::LsePool { x, r }, rg))
    }

    /// `[N,C,H,W] → [N,C]` global average pooling.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let plane = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::MeanPool(x), rg))
    }

    /// Softmax over the spatial positions of each `[H,W]` plane.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = dims4(self.value(x))?;
        let mut value = self.value(x).clone();
        for p in value.data_mut().chunks_mut(h * w) {
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            p.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SpatialSoftmax(x), rg))
    }

    /// `Σ_ij weights[n,0,i,j] · features[n,c,i,j] → [N,C]`.
    pub fn weighted_pool(&mut self, features: Var, weights: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(features))?;
        let wshape = self.value(weights).shape();
        if wshape != [n, 1, h, w] {
            return Err(Error::Shape(format!("pool weights {wshape:?} vs features [{n},{c},{h},{w}]")));
        }
        let plane = h * w;
        let f = self.value(features).data();
        let wt = self.value(weights).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let wp = &wt[i * plane..][..plane];
            for ch in 0..c {
                let fp = &f[(i * c + ch) * plane..][..plane];
                out[i * c + ch] = fp.iter().zip(wp).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(&[features, weights]);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::WeightedPool { features, weights }, rg))
    }

    /// `x[n,c,·,·] * scales[n,c]`.
    pub fn scale_channels(&mut self, x: Var, scales: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        if self.value(scales).shape() != [n, c] {
            return Err(Error::Shape(format!(
                "channel scales {:?} vs [{n},{c}]",
                self.value(scales).shape()
            )));
        }
        let s = self.value(scales).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, p) in value.data_mut().chunks_mut(h * w).enumerate() {
            p.iter_mut().for_each(|v| *v *= s[i]);
        }
        let rg = self.rg(&[x, scales]);
        Ok(self.push(value, Op::ScaleChannels { x, scales }, rg))
    }

    /// Adds a `[N,1,H,W]` map to every channel of `x[N,C,H,W]`.
    pub fn add_map(&mut self, x: Var, map: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        if self.value(map).shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "map {:?} vs features [{n},{c},{h},{w}]",
                self.value(map).shape()
            )));
        }
        let plane = h * w;
        let m = self.value(map).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, p) in value.data_mut().chunks_mut(plane).enumerate() {
            let mp = &m[(i / c) * plane..][..plane];
            p.iter_mut().zip(mp).for_each(|(v, a)| *v += a);
        }
        let rg = self.rg(&[x, map]);
        Ok(self.push(value, Op::AddMap { x, map }, rg))
    }

    /// `[N,1,H,W] → [N,D,H,W]` by repetition.
    pub fn expand_channels(&mut self, x: Var, d: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        if c != 1 {
            return Err(Error::Shape(format!("expand_channels needs 1 channel, got {c}")));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * d * plane);
        for i in 0..n {
            for _ in 0..d {
                out.extend_from_slice(&src[i * plane..][..plane]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, d, h, w], out)?, Op::ExpandChannels(x), rg))
    }

    /// Channel-axis concatenation.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = dims4(self.value(a))?;
        let (nb, cb, hb, wb) = dims4(self.value(b))?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape("concat: batch/spatial extents differ".into()));
        }
        let plane = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * plane..][..ca * plane]);
            out.extend_from_slice(&bv[i * cb * plane..][..cb * plane]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[n, ca + cb, h, w], out)?, Op::Concat(a, b), rg))
    }

    /// Per-channel batch normalization over `(N,H,W)`.
    ///
    /// With `running = None` the batch statistics are used and returned; otherwise the
    /// supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = dims4(self.value(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!("batch norm affine params must have {c} entries")));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let xv = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::Shape("running stats length mismatch".into()));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        mean[ch] += xv[(i * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for i in 0..n {
                    for ch in 0..c {
                        var[ch] += xv[(i * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / v.max(BN_VAR_FLOOR).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (idx, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (idx / plane) % c;
            *xh = (xv[idx] - mean[ch]) * inv_std[ch];
            *o = *xh * g[ch] + b[ch];
        }
        let rg = self.rg(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let v = self.push(
            Tensor::new(&[n, c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Per-plane min-max normalization to `[0,1]`; a constant plane maps to zeros.
    pub fn normalize_min_max(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = dims4(self.value(x))?;
        let plane = h * w;
        let mut value = self.value(x).clone();
        let mut argmin = Vec::new();
        let mut argmax = Vec::new();
        let mut range = Vec::new();
        for p in value.data_mut().chunks_mut(plane) {
            let (imin, imax) = kernels::arg_extrema(p);
            let (lo, hi) = (p[imin], p[imax]);
            let r = hi - lo;
            if r > 0.0 {
                p.iter_mut().for_each(|v| *v = ((*v - lo) / r).clamp(0.0, 1.0));
            } else {
                p.iter_mut().for_each(|v| *v = 0.0);
            }
            argmin.push(imin);
            argmax.push(imax);
            range.push(r);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::NormalizeMinMax {
                x,
                argmin,
                argmax,
                range,
            },
            rg,
        ))
    }

    /// `[N,D,H,W] → [N,1,H,W]` maximum over channels (first index wins ties).
    pub fn max_channels(&mut self, x: Var) -> Result<Var> {
        let (n, d, h, w) = dims4(self.value(x))?;
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * plane];
        let mut argmax = vec![0usize; n * plane];
        for i in 0..n {
            for k in 0..d {
                let p = &xv[(i * d + k) * plane..][..plane];
                for (j, &v) in p.iter().enumerate() {
                    if v > out[i * plane + j] {
                        out[i * plane + j] = v;
                        argmax[i * plane + j] = k;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, 1, h, w], out)?, Op::MaxChannels { x, argmax }, rg))
    }

    /// `[N,K,H,W] → [N,K]`.
    pub fn sum_spatial(&mut self, x: Var) -> Result<Var> {
        let (n, k, h, w) = dims4(self.value(x))?;
        let out = self.value(x).data().chunks(h * w).map(|p| p.iter().sum()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, k], out)?, Op::SumSpatial(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Bilinear resampling of the trailing two axes (half-pixel centres).
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape("upsample needs at least 2 axes".into()));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("upsample target extents must be positive".into()));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let out = kernels::bilinear_forward(self.value(x).data(), planes, h, w, out_h, out_w);
        let mut oshape = shape[..shape.len() - 2].to_vec();
        oshape.extend_from_slice(&[out_h, out_w]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::Upsample { x, out_h, out_w }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        self.value(logits).expect_same_shape(targets)?;
        let l = self.value(logits).data();
        let n = l.len() as f64;
        let total: f64 = l
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// Populates gradients of `loss` with respect to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * av[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] / bv[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] -= g[j] * out[j] / bv[j];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g))
            }
            Op::Relu(a) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    if out[j] > 0.0 {
                        s[j] += g[j];
                    }
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (gi, gk) = kernels::conv2d_backward(
                    geom,
                    val(*input),
                    val(*kernel),
                    g,
                    wants(*input),
                    wants(*kernel),
                );
                if let Some(gi) = gi {
                    acc(*input, &mut |s| s.iter_mut().zip(&gi).for_each(|(s, g)| *s += g));
                }
                if let Some(gk) = gk {
                    acc(*kernel, &mut |s| s.iter_mut().zip(&gk).for_each(|(s, g)| *s += g));
                }
            }
            Op::ChannelBias { x, bias } => {
                let shape = nodes[x.0].value.shape();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*bias, &mut |s| {
                    for (idx, p) in g.chunks(plane).enumerate() {
                        s[idx % c] += p.iter().sum::<f64>();
                    }
                });
            }
            Op::RowBias { x, bias } => {
                let k = nodes[bias.0].value.len();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*bias, &mut |s| {
                    for row in g.chunks(k) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Linear { x, weight } => {
                let (n, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                let k = nodes[weight.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*weight));
                acc(*x, &mut |s| {
                    for i in 0..n {
                        for j in 0..k {
                            let gj = g[i * k + j];
                            for t in 0..c {
                                s[i * c + t] += gj * wv[j * c + t];
                            }
                        }
                    }
                });
                acc(*weight, &mut |s| {
                    for i in 0..n {
                        for j in 0..k {
                            let gj = g[i * k + j];
                            for t in 0..c {
                                s[j * c + t] += gj * xv[i * c + t];
                            }
                        }
                    }
                });
            }
            Op::LsePool { x, r } => {
                let shape = nodes[x.0].value.shape();
                let plane = shape[2] * shape[3];
                let gx = kernels::lse_pool_backward(val(*x), plane, *r, g);
                acc(*x, &mut |s| s.iter_mut().zip(&gx).for_each(|(s, g)| *s += g));
            }
            Op::MeanPool(x) => {
                let shape = nodes[x.0].value.shape();
                let plane = shape[2] * shape[3];
                acc(*x, &mut |s| {
                    for (idx, p) in s.chunks_mut(plane).enumerate() {
                        let gv = g[idx] / plane as f64;
                        p.iter_mut().for_each(|v| *v += gv);
                    }
                });
            }
            Op::SpatialSoftmax(x) => {
                let shape = nodes[x.0].value.shape();
                let plane = shape[2] * shape[3];
                acc(*x, &mut |s| {
                    for ((sp, yp), gp) in s.chunks_mut(plane).zip(out.chunks(plane)).zip(g.chunks(plane)) {
                        let dot: f64 = yp.iter().zip(gp).map(|(y, g)| y * g).sum();
                        for j in 0..plane {
                            sp[j] += yp[j] * (gp[j] - dot);
                        }
                    }
                });
            }
            Op::WeightedPool { features, weights } => {
                let shape = nodes[features.0].value.shape();
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let (fv, wv) = (val(*features), val(*weights));
                acc(*features, &mut |s| {
                    for i in 0..n {
                        for ch in 0..c {
                            let gv = g[i * c + ch];
                            let sp = &mut s[(i * c + ch) * plane..][..plane];
                            let wp = &wv[i * plane..][..plane];
                            sp.iter_mut().zip(wp).for_each(|(s, w)| *s += gv * w);
                        }
                    }
                });
                acc(*weights, &mut |s| {
                    for i in 0..n {
                        for ch in 0..c {
                            let gv = g[i * c + ch];
                            let fp = &fv[(i * c + ch) * plane..][..plane];
                            let sp = &mut s[i * plane..][..plane];
                            sp.iter_mut().zip(fp).for_each(|(s, f)| *s += gv * f);
                        }
                    }
                });
            }
            Op::ScaleChannels { x, scales } => {
                let shape = nodes[x.0].value.shape();
                let plane = shape[2] * shape[3];
                let (xv, sv) = (val(*x), val(*scales));
                acc(*x, &mut |s| {
                    for (idx, (sp, gp)) in s.chunks_mut(plane).zip(g.chunks(plane)).enumerate() {
                        sp.iter_mut().zip(gp).for_each(|(s, g)| *s += g * sv[idx]);
                    }
                });
                acc(*scales, &mut |s| {
                    for (idx, (xp, gp)) in xv.chunks(plane).zip(g.chunks(plane)).enumerate() {
                        s[idx] += xp.iter().zip(gp).map(|(x, g)| x * g).sum::<f64>();
                    }
                });
            }
            Op::AddMap { x, map } => {
                let shape = nodes[x.0].value.shape();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*map, &mut |s| {
                    for (idx, gp) in g.chunks(plane).enumerate() {
                        let sp = &mut s[(idx / c) * plane..][..plane];
                        sp.iter_mut().zip(gp).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::ExpandChannels(x) => {
                let oshape = nodes[i].value.shape();
                let (d, plane) = (oshape[1], oshape[2] * oshape[3]);
                acc(*x, &mut |s| {
                    for (idx, gp) in g.chunks(plane).enumerate() {
                        let sp = &mut s[(idx / d) * plane..][..plane];
                        sp.iter_mut().zip(gp).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Concat(a, b) => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                acc(*a, &mut |s| {
                    for i in 0..n {
                        let src = &g[i * (ca + cb) * plane..][..ca * plane];
                        s[i * ca * plane..][..ca * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, g)| *s += g);
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..n {
                        let src = &g[(i * (ca + cb) + ca) * plane..][..cb * plane];
                        s[i * cb * plane..][..cb * plane]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = nodes[x.0].value.shape();
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let count = (n * plane) as f64;
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (idx, (gp, xp)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = idx % c;
                    sum_g[ch] += gp.iter().sum::<f64>();
                    sum_gx[ch] += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
                }
                acc(*gamma, &mut |s| s.iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v));
                acc(*beta, &mut |s| s.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v));
                acc(*x, &mut |s| {
                    for (idx, (sp, (gp, xp))) in s
                        .chunks_mut(plane)
                        .zip(g.chunks(plane).zip(xhat.chunks(plane)))
                        .enumerate()
                    {
                        let ch = idx % c;
                        let k = gam[ch] * inv_std[ch];
                        // a floored variance is a constant, so only the mean path remains
                        let floored = inv_std[ch] >= 1.0 / BN_VAR_FLOOR.sqrt();
                        for j in 0..plane {
                            if *batch_stats && floored {
                                sp[j] += k * (gp[j] - sum_g[ch] / count);
                            } else if *batch_stats {
                                sp[j] += k * (gp[j] - sum_g[ch] / count - xp[j] * sum_gx[ch] / count);
                            } else {
                                sp[j] += k * gp[j];
                            }
                        }
                    }
                });
            }
            Op::NormalizeMinMax {
                x,
                argmin,
                argmax,
                range,
            } => {
                let shape = nodes[x.0].value.shape();
                let plane = shape[2] * shape[3];
                acc(*x, &mut |s| {
                    for (p, (sp, (gp, yp))) in s
                        .chunks_mut(plane)
                        .zip(g.chunks(plane).zip(out.chunks(plane)))
                        .enumerate()
                    {
                        let r = range[p];
                        if r <= 0.0 {
                            continue;
                        }
                        let mut to_min = 0.0;
                        let mut to_max = 0.0;
                        for j in 0..plane {
                            sp[j] += gp[j] / r;
                            to_min += gp[j] * (yp[j] - 1.0) / r;
                            to_max -= gp[j] * yp[j] / r;
                        }
                        sp[argmin[p]] += to_min;
                        sp[argmax[p]] += to_max;
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        if av[j] <= bv[j] {
                            s[j] += g[j];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        if av[j] > bv[j] {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::MaxChannels { x, argmax } => {
                let shape = nodes[x.0].value.shape();
                let (d, plane) = (shape[1], shape[2] * shape[3]);
                acc(*x, &mut |s| {
                    for (idx, (&gv, &k)) in g.iter().zip(argmax).enumerate() {
                        let (n, j) = (idx / plane, idx % plane);
                        s[(n * d + k) * plane + j] += gv;
                    }
                });
            }
            Op::SumSpatial(x) => {
                let shape = nodes[x.0].value.shape();
                let plane = shape[2] * shape[3];
                acc(*x, &mut |s| {
                    for (idx, sp) in s.chunks_mut(plane).enumerate() {
                        sp.iter_mut().for_each(|v| *v += g[idx]);
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Upsample { x, out_h, out_w } => {
                let shape = nodes[x.0].value.shape();
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let planes = nodes[x.0].value.len() / (h * w);
                let gx = kernels::bilinear_backward(g, planes, h, w, *out_h, *out_w);
                acc(*x, &mut |s| s.iter_mut().zip(&gx).for_each(|(s, g)| *s += g));
            }
            Op::BceWithLogits { logits, targets } => {
                let l = val(*logits);
                let n = l.len() as f64;
                acc(*logits, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[0] * (kernels::sigmoid(l[j]) - targets[j]) / n;
                    }
                });
            }
        }
    }
}
