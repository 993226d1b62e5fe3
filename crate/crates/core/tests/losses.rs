mod common;

use common::*;
use hiermine::data::BinaryMask;
use hiermine::losses::{self, LossBreakdown, LossWeights};
use hiermine::model::heads::{AttentionMap, AttentionStage};
use hiermine::numerics::Tensor;
use rand::Rng;

const ORACLE_TOL: f64 = 1e-12;

#[test]
fn bound_and_union_match_scalar_oracles() {
    let mut r = rng(20);
    for _ in 0..100 {
        let inst = instance(&mut r);
        let per = |f: fn(&[f64], &[Vec<f64>], &[u8]) -> f64| {
            mean((0..inst.n).map(|i| f(&planes(&inst.mp, i)[0], &planes(&inst.ma, i), inst.labels[i].values())))
        };
        let (b, ob) = (batch_bound(&inst), per(oracle_bound));
        assert!((b - ob).abs() <= ORACLE_TOL, "bound {b} vs {ob}");
        let (u, ou) = (batch_union(&inst), per(oracle_union));
        assert!((u - ou).abs() <= ORACLE_TOL, "union {u} vs {ou}");

        // single-image value API agrees with the same oracles
        let i = 0;
        let y = &inst.labels[i];
        let mp = normalized(inst.mp.index_first(i), inst.h, inst.w);
        let ma = normalized(inst.ma.index_first(i), inst.h, inst.w);
        let sb = losses::attention_bound_loss(&mp, &ma, y).unwrap();
        let sbo = oracle_bound(&planes(&inst.mp, i)[0], &planes(&inst.ma, i), y.values());
        assert!((sb - sbo).abs() <= ORACLE_TOL);
        let su = losses::attention_union_loss(&mp, &ma, y).unwrap();
        let suo = oracle_union(&planes(&inst.mp, i)[0], &planes(&inst.ma, i), y.values());
        assert!((su - suo).abs() <= ORACLE_TOL);
    }
}

#[test]
fn union_map_matches_scalar_oracle() {
    let mut r = rng(21);
    for _ in 0..100 {
        let inst = instance(&mut r);
        let ma = normalized(inst.ma.index_first(0), inst.h, inst.w);
        let got = losses::attention_union_map(&ma, &inst.labels[0]).unwrap();
        let want = oracle_union_map(&planes(&inst.ma, 0), inst.labels[0].values());
        assert_eq!(got.shape(), &[inst.h, inst.w]);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= ORACLE_TOL);
        }
    }
}

#[test]
fn amse_matches_scalar_oracle() {
    let mut r = rng(22);
    for _ in 0..100 {
        let inst = amse_instance(&mut r);
        let (a, oa) = (batch_amse(&inst), oracle_amse_batch(&inst));
        assert!((a - oa).abs() <= ORACLE_TOL, "amse {a} vs {oa}");

        let s = inst.soft.shape();
        let (h, w) = (s[2], s[3]);
        let map = AttentionMap::new(inst.soft.index_first(0), AttentionStage::SoftMasked, (h / 8, w / 8), (h, w)).unwrap();
        let masks: Vec<BinaryMask> = inst.masks[0].iter().flatten().cloned().collect();
        let single = losses::attention_amse_loss(&map, &masks, &inst.labels[0]).unwrap();
        let g: Vec<Option<Vec<bool>>> = inst.masks[0].iter().map(|m| m.as_ref().map(|m| m.region.pixels().to_vec())).collect();
        let want = oracle_amse(&planes(&inst.soft, 0), &g, inst.labels[0].values());
        assert!((single - want).abs() <= ORACLE_TOL);
    }
}

#[test]
fn losses_stay_in_unit_interval() {
    let mut r = rng(30);
    for i in 0..1000 {
        let inst = instance(&mut r);
        // a share of saturated and all-zero maps exercises the edges
        let inst = match i % 10 {
            0 => Instance { ma: inst.ma.map(|_| 0.0), ..inst },
            1 => Instance { mp: inst.mp.map(|_| 1.0), ..inst },
            _ => inst,
        };
        for v in [batch_bound(&inst), batch_union(&inst)] {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
        let a = batch_amse(&amse_instance(&mut r));
        assert!((0.0..=1.0).contains(&a), "{a}");
    }
}

#[test]
fn bound_loss_grows_as_positive_attention_shrinks() {
    let mut r = rng(31);
    for _ in 0..1000 {
        let inst = instance(&mut r);
        let before = batch_bound(&inst);
        let shrunk = Instance {
            mp: inst.mp.map(|v| 0.5 * v),
            ..inst
        };
        let after = batch_bound(&shrunk);
        assert!(after >= before - 1e-15, "{before} -> {after}");
    }
}

#[test]
fn duplicating_a_sample_leaves_batch_losses_unchanged() {
    let mut r = rng(32);
    for _ in 0..100 {
        let one = instance(&mut r);
        let one = Instance {
            n: 1,
            mp: one.mp.index_first(0).reshape(&[1, 1, one.h, one.w]).unwrap(),
            ma: one.ma.index_first(0).reshape(&[1, one.d, one.h, one.w]).unwrap(),
            labels: vec![one.labels[0].clone()],
            ..one
        };
        let k = r.gen_range(2..=4);
        let rep = |t: &Tensor| {
            let s = t.shape();
            let data: Vec<f64> = (0..k).flat_map(|_| t.data().iter().copied()).collect();
            Tensor::new(&[k, s[1], s[2], s[3]], data).unwrap()
        };
        let many = Instance {
            n: k,
            mp: rep(&one.mp),
            ma: rep(&one.ma),
            labels: vec![one.labels[0].clone(); k],
            ..one
        };
        assert!((batch_bound(&one) - batch_bound(&many)).abs() <= ORACLE_TOL);
        assert!((batch_union(&one) - batch_union(&many)).abs() <= ORACLE_TOL);
    }
}

#[test]
fn recomposition_skips_disabled_terms() {
    let b = LossBreakdown {
        l_ab: 0.7,
        l_pn: 0.6,
        l_bound: 0.2,
        l_union: 0.3,
        l_amse: f64::NAN,
        total: 0.0,
        n_positive_classes: 1,
    };
    let w = LossWeights {
        z: 0.0,
        ..LossWeights::default()
    };
    let want = 0.7 + 0.01 * 0.6 + 0.001 * 0.2 + 0.001 * 0.3;
    assert!((b.recompose(&w) - want).abs() <= ORACLE_TOL);
}

proptest::proptest! {
    #[test]
    fn binary_maps_inside_saturated_positive_give_zero_bound(seed in 0u64..500) {
        let mut r = rng(seed);
        let inst = instance(&mut r);
        let plane = inst.h * inst.w;
        let mut ma: Vec<f64> = inst.ma.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        for c in 0..inst.n * inst.d {
            ma[c * plane] = 1.0;
        }
        let saturated = Instance {
            mp: inst.mp.map(|_| 1.0),
            ma: Tensor::new(inst.ma.shape(), ma).unwrap(),
            ..inst
        };
        let v = batch_bound(&saturated);
        // only the denominator guard remains
        proptest::prop_assert!(v <= losses::DENOM_EPS, "{}", v);
    }
}
