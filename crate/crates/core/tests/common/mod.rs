//! Shared oracles and fixtures for the integration suites.
#![allow(dead_code)]

use hiermine::data::{BinaryMask, BoxAnnotation, LabelSet, Region};
use hiermine::losses::{self, DENOM_EPS};
use hiermine::model::backbone::{
    channel_attention, fab_forward, position_attention, BackboneConfig, ChannelAttentionParams, FabFlags,
    PositionAttentionParams,
};
use hiermine::model::heads::{self, online_cam, AttentionMap, AttentionStage, SOFT_MASK_ALPHA, SOFT_MASK_BETA};
use hiermine::model::{ArchFlags, Model, ModelConfig};
use hiermine::numerics::{grad_check, Tape, Tensor, Var};
use hiermine::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn soft(m: f64) -> f64 {
    1.0 / (1.0 + (-heads::SOFT_MASK_ALPHA * (m - heads::SOFT_MASK_BETA)).exp())
}

// Scalar-loop oracles, written straight from the definitions.

/// `mp: [h*w]`, `ma[k]: [h*w]`.
pub fn oracle_bound(mp: &[f64], ma: &[Vec<f64>], y: &[u8]) -> f64 {
    let n = y.iter().filter(|&&v| v == 1).count();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 0..ma.len() {
        if y[k] != 1 {
            continue;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..mp.len() {
            num += mp[i].min(ma[k][i]) * soft(ma[k][i]);
            den += ma[k][i];
        }
        total += 1.0 - num / (den + DENOM_EPS);
    }
    total / n as f64
}

pub fn oracle_union_map(ma: &[Vec<f64>], y: &[u8]) -> Vec<f64> {
    let len = ma[0].len();
    let mut out = vec![0.0; len];
    for i in 0..len {
        let mut best = 0.0f64;
        for k in 0..ma.len() {
            let v = ma[k][i] * y[k] as f64;
            if v > best {
                best = v;
            }
        }
        out[i] = best;
    }
    out
}

pub fn oracle_union(mp: &[f64], ma: &[Vec<f64>], y: &[u8]) -> f64 {
    if y.iter().all(|&v| v == 0) {
        return 0.0;
    }
    let mu = oracle_union_map(ma, y);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..mp.len() {
        num += mp[i].min(mu[i]) * soft(mp[i]);
        den += mp[i];
    }
    1.0 - num / (den + DENOM_EPS)
}

/// `t[k]`: soft-masked maps at image resolution; `g[k]`: optional binary masks.
pub fn oracle_amse(t: &[Vec<f64>], g: &[Option<Vec<bool>>], y: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for k in 0..t.len() {
        let Some(gk) = &g[k] else { continue };
        if y[k] != 1 {
            continue;
        }
        n += 1;
        let mut num = 0.0;
        let mut st = 0.0;
        let mut sg = 0.0;
        for i in 0..t[k].len() {
            let gi = if gk[i] { 1.0 } else { 0.0 };
            num += (t[k][i] - gi) * (t[k][i] - gi);
            st += t[k][i];
            sg += gi;
        }
        total += num / (st + sg + DENOM_EPS);
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

pub fn oracle_iou(a: &Region, b: &Region) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn oracle_ior(pred: &Region, gt: &Region) -> f64 {
    let (mut inter, mut area) = (0usize, 0usize);
    for r in 0..pred.height() {
        for c in 0..pred.width() {
            area += pred.get(r, c) as usize;
            inter += (pred.get(r, c) && gt.get(r, c)) as usize;
        }
    }
    if area == 0 {
        0.0
    } else {
        inter as f64 / area as f64
    }
}

/// Pairwise enumeration of positive/negative pairs.
pub fn oracle_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs as f64
}

pub fn random_region(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Region {
    let boxes = rng.gen_range(0..3);
    let mut r = Region::empty(h, w);
    for _ in 0..boxes {
        let bw = rng.gen_range(1..=w / 2);
        let bh = rng.gen_range(1..=h / 2);
        let b = BoxAnnotation {
            class_id: 0,
            x: rng.gen_range(0..=w - bw),
            y: rng.gen_range(0..=h - bh),
            w: bw,
            h: bh,
        };
        r = r.union(&Region::from_box(&b, h, w));
    }
    if rng.gen_bool(0.3) {
        for _ in 0..rng.gen_range(1..6) {
            r.set(rng.gen_range(0..h), rng.gen_range(0..w), true);
        }
    }
    r
}

pub fn random_labels(rng: &mut ChaCha8Rng, d: usize) -> LabelSet {
    LabelSet::new((0..d).map(|_| rng.gen_bool(0.5) as u8).collect()).unwrap()
}

/// Smallest geometry the architecture accepts, for full-model gradient checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: (16, 16),
            stage_channels: vec![3, 4, 4, 4],
            encoded_channels: 4,
            downsample_factor: 8,
            fab_reduced_channels: 4,
            se_ratio: 2,
        },
        num_classes: 2,
        lse_r: 6.0,
        zero_init_heads: false,
    }
}

// Gradient checks.

pub const GRAD_EPS: f64 = 1e-6;

fn maps_away_from_ties(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    loop {
        let t = uniform(rng, shape, lo, hi);
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        if v.windows(2).all(|w| w[1] - w[0] > 1e-4) {
            return t;
        }
    }
}

/// `[N,1,h,w]` map whose values stay `gap` away from every channel of `b: [N,D,h,w]`.
fn separated_pair(rng: &mut ChaCha8Rng, b: &Tensor, gap: f64, lo: f64, hi: f64) -> Tensor {
    let s = b.shape();
    let (n, d, plane) = (s[0], s[1], s[2] * s[3]);
    loop {
        let a = uniform(rng, &[n, 1, s[2], s[3]], lo, hi);
        let ok = (0..n).all(|i| {
            (0..d).all(|k| (0..plane).all(|p| (a.data()[i * plane + p] - b.data()[(i * d + k) * plane + p]).abs() > gap))
        });
        if ok {
            return a;
        }
    }
}

type Check = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn check(name: &str, f: Check, x: &Tensor, out: &mut Vec<(String, f64)>) {
    let err = grad_check(f, x, GRAD_EPS).unwrap_or(f64::INFINITY);
    out.push((name.to_string(), err));
}

/// Weighted scalar reduction so every output coordinate matters.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xabcdef);
    let w = uniform(&mut r, tape.value(v).shape(), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum_all(p))
}

/// One random point per differentiable operation; returns `(op, max relative error)`.
pub fn gradient_point(seed: u64) -> Vec<(String, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    // conv2d, both arguments, strided and dilated
    for &(stride, dil, pad) in &[(1usize, 1usize, 1usize), (2, 1, 1), (1, 2, 2)] {
        let x = uniform(&mut r, &[2, 3, 7, 7], -1.0, 1.0);
        let k = uniform(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
        let (kc, xc) = (k.clone(), x.clone());
        check(
            &format!("conv2d.input(s{stride},d{dil})"),
            Box::new(move |t, v| {
                let kv = t.constant(kc.clone());
                let y = t.conv2d(v, kv, stride, dil, pad)?;
                project(t, y, seed)
            }),
            &x,
            &mut out,
        );
        check(
            &format!("conv2d.kernel(s{stride},d{dil})"),
            Box::new(move |t, v| {
                let xv = t.constant(xc.clone());
                let y = t.conv2d(xv, v, stride, dil, pad)?;
                project(t, y, seed)
            }),
            &k,
            &mut out,
        );
    }

    // LSE pooling
    let x = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    check(
        "lse_pool",
        Box::new(move |t, v| {
            let y = t.lse_pool(v, heads::LSE_SHARPNESS)?;
            project(t, y, seed)
        }),
        &x,
        &mut out,
    );

    // FAB pieces: channel attention, position attention, full block w.r.t. input and params
    let c = 4;
    let feats = uniform(&mut r, &[2, c, 3, 3], -1.0, 1.0);
    let score = uniform(&mut r, &[1, c, 1, 1], -1.0, 1.0);
    let fc1 = uniform(&mut r, &[2, c], -1.0, 1.0);
    let fc1b = uniform(&mut r, &[2], 0.2, 0.5);
    let fc2 = uniform(&mut r, &[c, 2], -1.0, 1.0);
    let fc2b = uniform(&mut r, &[c], -0.5, 0.5);
    let pscore = uniform(&mut r, &[1, c, 1, 1], -1.0, 1.0);
    let gamma = uniform(&mut r, &[1], 0.5, 1.5);
    let beta = uniform(&mut r, &[1], -0.5, 0.5);
    let fab_params = vec![score, fc1, fc1b, fc2, fc2b, pscore, gamma, beta];
    let bind = |t: &mut Tape, p: &[Tensor], replace: Option<(usize, Var)>| {
        let vars: Vec<Var> = p
            .iter()
            .enumerate()
            .map(|(i, x)| match replace {
                Some((j, v)) if j == i => v,
                _ => t.constant(x.clone()),
            })
            .collect();
        (
            ChannelAttentionParams {
                score: vars[0],
                fc1_weight: vars[1],
                fc1_bias: vars[2],
                fc2_weight: vars[3],
                fc2_bias: vars[4],
            },
            PositionAttentionParams {
                score: vars[5],
                gamma: vars[6],
                beta: vars[7],
            },
        )
    };
    {
        let p = fab_params.clone();
        check(
            "fab.channel_attention",
            Box::new(move |t, v| {
                let (ca, _) = bind(t, &p, None);
                let a = channel_attention(t, &ca, v)?;
                project(t, a.weights, seed)
            }),
            &feats,
            &mut out,
        );
        let p = fab_params.clone();
        check(
            "fab.position_attention",
            Box::new(move |t, v| {
                let (_, pa) = bind(t, &p, None);
                let (m, _) = position_attention(t, &pa, v, None)?;
                project(t, m, seed)
            }),
            &feats,
            &mut out,
        );
        let p = fab_params.clone();
        check(
            "fab.block.input",
            Box::new(move |t, v| {
                let (ca, pa) = bind(t, &p, None);
                let o = fab_forward(t, &ca, &pa, v, FabFlags::FULL, None)?;
                project(t, o.features, seed)
            }),
            &feats,
            &mut out,
        );
        for (i, name) in ["score", "fc1", "fc1_bias", "fc2", "fc2_bias", "pa_score", "bn_gamma", "bn_beta"]
            .iter()
            .enumerate()
        {
            let p = fab_params.clone();
            let f = feats.clone();
            check(
                &format!("fab.block.{name}"),
                Box::new(move |t, v| {
                    let (ca, pa) = bind(t, &p, Some((i, v)));
                    let x = t.constant(f.clone());
                    let o = fab_forward(t, &ca, &pa, x, FabFlags::FULL, None)?;
                    project(t, o.features, seed)
                }),
                &fab_params[i],
                &mut out,
            );
        }
    }

    // online CAM, away from the ReLU kink
    let (f, w) = loop {
        let f = uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
        let w = uniform(&mut r, &[2, 3], -1.0, 1.0);
        let mut t = Tape::new();
        let (fv, wv) = (t.constant(f.clone()), t.constant(w.clone()));
        let k = t.reshape(wv, &[2, 3, 1, 1]).unwrap();
        let pre = t.conv2d(fv, k, 1, 1, 0).unwrap();
        if t.value(pre).data().iter().all(|v| v.abs() > 1e-3) {
            break (f, w);
        }
    };
    {
        let wc = w.clone();
        check(
            "cam.features",
            Box::new(move |t, v| {
                let wv = t.constant(wc.clone());
                let m = online_cam(t, v, wv)?;
                project(t, m, seed)
            }),
            &f,
            &mut out,
        );
        let fc = f.clone();
        check(
            "cam.weight",
            Box::new(move |t, v| {
                let fv = t.constant(fc.clone());
                let m = online_cam(t, fv, v)?;
                project(t, m, seed)
            }),
            &w,
            &mut out,
        );
    }

    // min-max normalization, distinct values
    let raw = maps_away_from_ties(&mut r, &[2, 2, 3, 3], 0.0, 2.0);
    check(
        "normalize_min_max",
        Box::new(move |t, v| {
            let m = t.normalize_min_max(v)?;
            project(t, m, seed)
        }),
        &raw,
        &mut out,
    );

    // soft mask in its transition band
    let m = uniform(&mut r, &[2, 3, 3], 0.37, 0.43);
    check(
        "soft_mask",
        Box::new(move |t, v| {
            let s = heads::soft_mask(t, v, heads::SOFT_MASK_ALPHA, heads::SOFT_MASK_BETA);
            project(t, s, seed)
        }),
        &m,
        &mut out,
    );

    // bound and union, w.r.t. each map, with M values near the mask transition
    let labels = vec![
        hiermine::data::LabelSet::from_classes(3, &[0, 2]),
        hiermine::data::LabelSet::from_classes(3, &[1]),
    ];
    let ma = uniform(&mut r, &[2, 3, 3, 3], 0.3, 0.6);
    let mp = separated_pair(&mut r, &ma, 1e-3, 0.3, 0.6);
    type LossFn = fn(&mut Tape, Var, Var, &[LabelSet], f64, f64) -> Result<Var>;
    for (name, loss) in [("bound", losses::bound_loss as LossFn), ("union", losses::union_loss as LossFn)] {
        let (l1, a1) = (labels.clone(), ma.clone());
        check(
            &format!("loss.{name}.positive_map"),
            Box::new(move |t, v| {
                let a = t.constant(a1.clone());
                loss(t, v, a, &l1, heads::SOFT_MASK_ALPHA, heads::SOFT_MASK_BETA)
            }),
            &mp,
            &mut out,
        );
        let (l2, p2) = (labels.clone(), mp.clone());
        check(
            &format!("loss.{name}.abnormality_maps"),
            Box::new(move |t, v| {
                let p = t.constant(p2.clone());
                loss(t, p, v, &l2, heads::SOFT_MASK_ALPHA, heads::SOFT_MASK_BETA)
            }),
            &ma,
            &mut out,
        );
    }

    // AMSE through soft mask and bilinear resize
    let maps = uniform(&mut r, &[2, 3, 2, 2], 0.36, 0.44);
    let masks: Vec<Vec<Option<hiermine::data::BinaryMask>>> = vec![
        vec![
            Some(hiermine::data::mask_from_boxes(
                &[BoxAnnotation { class_id: 0, x: 2, y: 3, w: 6, h: 5 }],
                0,
                (16, 16),
            )),
            None,
            Some(hiermine::data::mask_from_boxes(
                &[BoxAnnotation { class_id: 2, x: 9, y: 1, w: 3, h: 12 }],
                2,
                (16, 16),
            )),
        ],
        vec![None, None, None],
    ];
    {
        let l = labels.clone();
        check(
            "loss.amse",
            Box::new(move |t, v| losses::amse_loss(t, v, &masks, &l, (16, 16), heads::SOFT_MASK_ALPHA, heads::SOFT_MASK_BETA)),
            &maps,
            &mut out,
        );
    }

    // BCE with logits
    let logits = uniform(&mut r, &[3, 4], -3.0, 3.0);
    let targets = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
    check(
        "loss.bce",
        Box::new(move |t, v| t.bce_with_logits(v, &targets)),
        &logits,
        &mut out,
    );

    out
}

/// Total objective through the whole tiny model, w.r.t. selected parameters.
/// Parameters checked against the total objective, one per block.
pub const MODEL_GRAD_PARAMS: [&str; 10] = [
    "stage1.weight",
    "stage4.bias",
    "conv1.weight",
    "fab.ca.score.weight",
    "fab.ca.fc1.weight",
    "fab.pa.score.weight",
    "fab.pa.bn.gamma",
    "conv3.weight",
    "head.pn.weight",
    "head.ab.weight",
];

pub fn model_gradient_point(seed: u64, params: &[&str]) -> Vec<(String, f64)> {
    use hiermine::losses::{total_loss_vars, LossWeights};
    let cfg = tiny_model_config();
    let mut model = Model::new(cfg.clone(), seed).unwrap();
    let mut r = rng(seed + 1000);
    // zero-initialised biases put dead channels exactly on the relu kink
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = r.gen_range(-0.05..0.05);
            }
        }
    }
    let images = uniform(&mut r, &[2, 3, 16, 16], 0.0, 1.0);
    let labels = vec![LabelSet::from_classes(2, &[1]), LabelSet::from_classes(2, &[0, 1])];
    let masks = vec![
        vec![
            None,
            Some(hiermine::data::mask_from_boxes(
                &[BoxAnnotation { class_id: 1, x: 3, y: 2, w: 8, h: 6 }],
                1,
                (16, 16),
            )),
        ],
        vec![None, None],
    ];
    // heavier attention weights so their gradients are not swamped by BCE
    let weights = LossWeights {
        z: 0.5,
        lambda1: 0.3,
        lambda2: 0.3,
        lambda3: 0.3,
    };
    let mut out = Vec::new();
    for &name in params {
        let model = model.clone();
        let (images, labels, masks) = (images.clone(), labels.clone(), masks.clone());
        let x = model.params.get(name).unwrap().clone();
        let pname = name.to_string();
        let err = grad_check(
            move |t, v| {
                let fwd = model.forward_with(t, &images, ArchFlags::default(), true, &[(pname.as_str(), v)])?;
                let vars = total_loss_vars(t, &fwd.heads, &labels, &masks, &weights, (16, 16))?;
                Ok(vars.total)
            },
            &x,
            GRAD_EPS,
        )
        .unwrap_or(f64::INFINITY);
        out.push((format!("model.total.{name}"), err));
    }
    out
}

// Random loss instances shared by the loss suite and the acceptance run.

pub struct Instance {
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub mp: Tensor,
    pub ma: Tensor,
    pub labels: Vec<LabelSet>,
}

pub fn instance(r: &mut ChaCha8Rng) -> Instance {
    let n = r.gen_range(1..=3);
    let d = r.gen_range(1..=4);
    let (h, w) = (r.gen_range(2..=8), r.gen_range(2..=8));
    Instance {
        n,
        d,
        h,
        w,
        mp: uniform(r, &[n, 1, h, w], 0.0, 1.0),
        ma: uniform(r, &[n, d, h, w], 0.0, 1.0),
        labels: (0..n).map(|_| random_labels(r, d)).collect(),
    }
}

/// Per-sample planes: `planes(t, i)[k]` is the `[h*w]` plane of channel `k`.
pub fn planes(t: &Tensor, i: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let plane = s[2] * s[3];
    (0..s[1])
        .map(|k| t.data()[(i * s[1] + k) * plane..(i * s[1] + k + 1) * plane].to_vec())
        .collect()
}

pub fn batch_bound(inst: &Instance) -> f64 {
    let mut t = Tape::new();
    let p = t.constant(inst.mp.clone());
    let a = t.constant(inst.ma.clone());
    let l = losses::bound_loss(&mut t, p, a, &inst.labels, SOFT_MASK_ALPHA, SOFT_MASK_BETA).unwrap();
    t.value(l).item()
}

pub fn batch_union(inst: &Instance) -> f64 {
    let mut t = Tape::new();
    let p = t.constant(inst.mp.clone());
    let a = t.constant(inst.ma.clone());
    let l = losses::union_loss(&mut t, p, a, &inst.labels, SOFT_MASK_ALPHA, SOFT_MASK_BETA).unwrap();
    t.value(l).item()
}

pub fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn normalized(maps: Tensor, h: usize, w: usize) -> AttentionMap {
    AttentionMap::new(maps, AttentionStage::Normalized, (h, w), (8 * h, 8 * w)).unwrap()
}

/// Random soft-masked maps at image resolution plus per-class optional masks.
pub struct AmseInstance {
    pub soft: Tensor,
    pub masks: Vec<Vec<Option<BinaryMask>>>,
    pub labels: Vec<LabelSet>,
}

pub fn amse_instance(r: &mut ChaCha8Rng) -> AmseInstance {
    let n = r.gen_range(1..=3);
    let d = r.gen_range(1..=3);
    let (h, w) = (8 * r.gen_range(1..=2), 8 * r.gen_range(1..=2));
    let raw = uniform(r, &[n, d, h, w], 0.0, 1.0);
    let soft = raw.map(soft);
    let labels: Vec<LabelSet> = (0..n).map(|_| random_labels(r, d)).collect();
    let masks = labels
        .iter()
        .map(|y| {
            (0..d)
                .map(|k| {
                    (y.get(k) && r.gen_bool(0.7)).then(|| BinaryMask {
                        class_id: k,
                        region: random_region(r, h, w),
                    })
                })
                .collect()
        })
        .collect();
    AmseInstance { soft, masks, labels }
}

pub fn batch_amse(inst: &AmseInstance) -> f64 {
    let mut t = Tape::new();
    let s = t.constant(inst.soft.clone());
    let l = losses::amse_loss_soft(&mut t, s, &inst.masks, &inst.labels).unwrap();
    t.value(l).item()
}

pub fn oracle_amse_batch(inst: &AmseInstance) -> f64 {
    mean((0..inst.labels.len()).map(|i| {
        let g: Vec<Option<Vec<bool>>> = inst.masks[i].iter().map(|m| m.as_ref().map(|m| m.region.pixels().to_vec())).collect();
        oracle_amse(&planes(&inst.soft, i), &g, inst.labels[i].values())
    }))
}

