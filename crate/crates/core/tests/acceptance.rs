//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! The synthetic experiment (criteria 5, 6, 8) is described by
//! `configs/acceptance.toml` and takes several minutes in a release-like profile.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use common::*;
use hiermine::data::{Provenance, Sample};
use hiermine::evaluation::{
    attention_to_regions, auc, correct_ratio, evaluate, ior, iou, predict_samples, CriterionKind, EvalReport,
    LocalizationCase, LocalizationCriterion, DEFAULT_MIN_AREA,
};
use hiermine::losses;
use hiermine::pipeline::ablation::{lattice, AblationRow};
use hiermine::pipeline::refine::assert_disjoint;
use hiermine::pipeline::{self_refine, train, AblationFlags, ExperimentConfig, Split, TrainConfig, TrainOutcome, REFINE_IOU_TRIGGER};
use rand::Rng;

const EXPERIMENT: &str = include_str!("../../../configs/acceptance.toml");
const HARD_CLASS: usize = 2;
const IOU_T: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradient_soundness() -> Outcome {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut count = 0;
    for seed in 0..10 {
        for (name, err) in gradient_point(seed).into_iter().chain(model_gradient_point(seed, &MODEL_GRAD_PARAMS)) {
            count += 1;
            if !(err <= worst.1) {
                worst = (format!("{name}@{seed}"), err);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.1 < 1e-3 && secs < 60.0,
        format!("{count} checks over 10 points, worst {} = {:.2e}, {secs:.1}s", worst.0, worst.1),
    )
}

fn loss_oracles() -> Outcome {
    let mut r = rng(200);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let inst = instance(&mut r);
        let per = |f: fn(&[f64], &[Vec<f64>], &[u8]) -> f64| {
            mean((0..inst.n).map(|i| f(&planes(&inst.mp, i)[0], &planes(&inst.ma, i), inst.labels[i].values())))
        };
        worst = worst.max((batch_bound(&inst) - per(oracle_bound)).abs());
        worst = worst.max((batch_union(&inst) - per(oracle_union)).abs());
        let ma = normalized(inst.ma.index_first(0), inst.h, inst.w);
        let mu = losses::attention_union_map(&ma, &inst.labels[0]).unwrap();
        let want = oracle_union_map(&planes(&inst.ma, 0), inst.labels[0].values());
        for (g, w) in mu.data().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
        let a = amse_instance(&mut r);
        worst = worst.max((batch_amse(&a) - oracle_amse_batch(&a)).abs());
    }
    outcome(worst <= 1e-12, format!("100 instances, max |impl - oracle| = {worst:.1e}"))
}

fn loss_ranges(logs: &[(&str, &TrainOutcome, TrainConfig)]) -> Outcome {
    let mut r = rng(300);
    let mut in_range = true;
    let mut monotone = true;
    for _ in 0..1000 {
        let inst = instance(&mut r);
        let (b, u, a) = (batch_bound(&inst), batch_union(&inst), batch_amse(&amse_instance(&mut r)));
        in_range &= [b, u, a].iter().all(|v| (0.0..=1.0).contains(v));
        let shrunk = Instance {
            mp: inst.mp.map(|v| 0.5 * v),
            ..inst
        };
        monotone &= batch_bound(&shrunk) >= b;
    }
    let mut steps = 0;
    let mut worst = 0.0f64;
    for (_, o, cfg) in logs {
        let w = cfg.effective_weights();
        for s in &o.log {
            steps += 1;
            worst = worst.max((s.breakdown.recompose(&w) - s.breakdown.total).abs());
        }
    }
    outcome(
        in_range && monotone && worst <= 1e-12,
        format!("range ok: {in_range}, shrink-monotone: {monotone}, recomposition over {steps} logged steps max err {worst:.1e}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut r = rng(400);
    let mut exact = true;
    for _ in 0..100 {
        let (h, w) = (r.gen_range(4..=24), r.gen_range(4..=24));
        let (a, b) = (random_region(&mut r, h, w), random_region(&mut r, h, w));
        exact &= iou(&a, &b) == oracle_iou(&a, &b) && ior(&a, &b) == oracle_ior(&a, &b);
        let n = r.gen_range(2..=40);
        let mut labels: Vec<u8> = (0..n).map(|_| r.gen_bool(0.4) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..12) as f64 / 11.0).collect();
        exact &= auc(&scores, &labels).unwrap() == oracle_auc(&scores, &labels);
    }
    let cases: Vec<LocalizationCase> = (0..200)
        .map(|i| LocalizationCase {
            sample_id: format!("c{i}"),
            class_id: i % 3,
            predicted: random_region(&mut r, 16, 16),
            truth: random_region(&mut r, 16, 16),
        })
        .collect();
    let mut monotone = true;
    for kind in [CriterionKind::IoU, CriterionKind::IoR] {
        let mut prev = usize::MAX;
        for t in [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0] {
            let rep = correct_ratio(&cases, 3, LocalizationCriterion::new(kind, t).unwrap(), 0.999).unwrap();
            let n: usize = rep.classes.iter().map(|c| c.n_correct).sum();
            monotone &= n <= prev;
            prev = n;
        }
    }
    outcome(exact && monotone, format!("exact on 100 cases: {exact}, correct_ratio monotone: {monotone}"))
}

struct Row {
    name: String,
    config: TrainConfig,
    outcome: TrainOutcome,
    report: EvalReport,
}

impl Row {
    fn ratio(&self) -> f64 {
        self.report.report_for(CriterionKind::IoU, IOU_T).and_then(|r| r.mean).unwrap_or(0.0)
    }

    fn class_ratio(&self, k: usize) -> f64 {
        self.report.report_for(CriterionKind::IoU, IOU_T).and_then(|r| r.classes[k].ratio).unwrap_or(0.0)
    }

    fn auc(&self) -> f64 {
        self.report.mean_auc.unwrap_or(0.0)
    }
}

fn run_row(row: &AblationRow, train_set: &[Sample], eval_set: &[Sample], bin_threshold: f64) -> Row {
    let start = Instant::now();
    let outcome = train(train_set, &row.config, None).unwrap();
    let crit = [LocalizationCriterion::iou(IOU_T).unwrap()];
    let report = evaluate(&outcome.model, row.config.ablation_flags.arch(), eval_set, &crit, bin_threshold, None).unwrap();
    let r = Row {
        name: row.name.clone(),
        config: row.config.clone(),
        outcome,
        report,
    };
    println!(
        "  {:<16} mean ratio {:.3} [{}]  mean auc {:.4}  ({:.0}s)",
        r.name,
        r.ratio(),
        (0..3).map(|k| format!("{:.3}", r.class_ratio(k))).collect::<Vec<_>>().join(" "),
        r.auc(),
        start.elapsed().as_secs_f64()
    );
    r
}

fn refinement_invariants(train_set: &[Sample], eval_set: &[Sample], sr: &Row, bin_threshold: f64) -> Outcome {
    let flags = sr.config.ablation_flags.arch();
    let refined = self_refine(train_set, Split::Train, &sr.outcome.model, flags, bin_threshold).unwrap();
    let preds = predict_samples(&sr.outcome.model, flags, train_set).unwrap();
    let (mut masks, mut kept, mut ok) = (0, 0, true);
    for ((before, after), pred) in train_set.iter().zip(&refined).zip(&preds) {
        if !before.has_boxes() {
            ok &= before == after;
            continue;
        }
        for r in &after.refined {
            masks += 1;
            let original = before.box_mask(r.class_id).unwrap();
            ok &= r.mask.region.intersection_area(&original.region) == r.mask.region.area();
            let att = attention_to_regions(&pred.attention.class_map(r.class_id), r.class_id, bin_threshold, DEFAULT_MIN_AREA).unwrap();
            let below = iou(&att.mask, &original.region) < REFINE_IOU_TRIGGER;
            ok &= below == (r.provenance == Provenance::OriginalBox);
            if below {
                kept += 1;
                ok &= r.mask == original;
            }
        }
    }
    let refused = self_refine(eval_set, Split::Eval, &sr.outcome.model, flags, bin_threshold).is_err();
    assert_disjoint(train_set, eval_set);
    outcome(
        ok && refused && masks > 0,
        format!("{masks} annotated masks ({kept} kept as boxes, {} narrowed), subset/identity ok: {ok}, eval split refused: {refused}", masks - kept),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn determinism(exp: &ExperimentConfig, train_set: &[Sample], eval_set: &[Sample]) -> Outcome {
    let cfg = TrainConfig {
        epochs: 2,
        ..exp.train.clone()
    };
    let small = &train_set[..train_set.len().min(120)];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut reports = Vec::new();
    for d in &dirs {
        let o = train(small, &cfg, Some(d.path())).unwrap();
        let crit = [LocalizationCriterion::iou(0.1).unwrap(), LocalizationCriterion::ior(0.25).unwrap()];
        let heat = d.path().join("heat");
        let rep = evaluate(&o.model, AblationFlags::FULL.arch(), eval_set, &crit, exp.bin_threshold, Some(&heat)).unwrap();
        reports.push(rep.to_csv());
    }
    let same_ckpt = dir_bytes(&dirs[0].path().join("checkpoint")) == dir_bytes(&dirs[1].path().join("checkpoint"));
    let same_log = fs::read(dirs[0].path().join("loss_log.csv")).unwrap() == fs::read(dirs[1].path().join("loss_log.csv")).unwrap();
    let same_heat = dir_bytes(&dirs[0].path().join("heat")) == dir_bytes(&dirs[1].path().join("heat"));
    let same_report = reports[0] == reports[1];
    outcome(
        same_ckpt && same_log && same_report && same_heat,
        format!("checkpoint {same_ckpt}, loss log {same_log}, report {same_report}, heatmaps {same_heat}"),
    )
}

fn main() {
    let total = Instant::now();
    let exp: ExperimentConfig = toml::from_str(EXPERIMENT).expect("acceptance config");
    let mut results: Vec<(u32, Outcome)> = Vec::new();

    results.push((1, gradient_soundness()));
    results.push((2, loss_oracles()));
    results.push((4, metric_oracles()));

    let (train_set, eval_set) = exp.datasets().unwrap();
    println!(
        "experiment: {} training images ({} with boxes), {} evaluation images",
        train_set.len(),
        train_set.iter().filter(|s| s.has_boxes()).count(),
        eval_set.len()
    );
    let exp_start = Instant::now();
    let mut no_boxes = exp.train.clone();
    no_boxes.ablation_flags.use_amse = false;
    let rows: Vec<Row> = lattice(&no_boxes, &["RN50-8-LSE", "+FAB", "+FAB+PA", "+FAB+PA+ABU"])
        .unwrap()
        .iter()
        .map(|row| run_row(row, &train_set, &eval_set, exp.bin_threshold))
        .collect();
    let mut with_boxes = exp.train.clone();
    with_boxes.ablation_flags.use_amse = true;
    let amse_row = lattice(&with_boxes, &["+FAB+PA+ABU"]).unwrap().remove(0);
    let amse = run_row(
        &AblationRow {
            name: "+ABU+AMSE".into(),
            ..amse_row
        },
        &train_set,
        &eval_set,
        exp.bin_threshold,
    );
    let exp_secs = exp_start.elapsed().as_secs_f64();

    let (lse, fab, pa, full) = (&rows[0], &rows[1], &rows[2], &rows[3]);
    let ordered = full.ratio() > pa.ratio() && pa.ratio() >= fab.ratio() && fab.ratio() > lse.ratio();
    let gap = full.ratio() - lse.ratio();
    results.push((
        5,
        outcome(
            ordered && gap >= 0.10 && exp_secs < 1800.0,
            format!(
                "mean ratio @IoU>{IOU_T}: full {:.3}, +FAB+PA {:.3}, +FAB {:.3}, LSE {:.3}; ordered: {ordered}, gap {gap:.3} (need >= 0.10); experiment {exp_secs:.0}s",
                full.ratio(),
                pa.ratio(),
                fab.ratio(),
                lse.ratio()
            ),
        ),
    ));
    let hard_gain = amse.class_ratio(HARD_CLASS) - full.class_ratio(HARD_CLASS);
    results.push((
        6,
        outcome(
            hard_gain >= 0.05,
            format!(
                "hard class (bar) ratio with AMSE {:.3} vs z=0 {:.3}, gain {hard_gain:.3} (need >= 0.05)",
                amse.class_ratio(HARD_CLASS),
                full.class_ratio(HARD_CLASS)
            ),
        ),
    ));
    results.push((
        7,
        refinement_invariants(&train_set, &eval_set, &amse, exp.bin_threshold),
    ));
    results.push((
        8,
        outcome(
            full.auc() >= lse.auc() - 0.02,
            format!("mean AUC full {:.4} vs LSE {:.4} (need >= LSE - 0.02)", full.auc(), lse.auc()),
        ),
    ));
    let logs: Vec<(&str, &TrainOutcome, TrainConfig)> = rows
        .iter()
        .chain(std::iter::once(&amse))
        .map(|r| (r.name.as_str(), &r.outcome, r.config.clone()))
        .collect();
    results.push((3, loss_ranges(&logs)));
    results.push((9, determinism(&exp, &train_set, &eval_set)));

    results.sort_by_key(|(n, _)| *n);
    println!();
    for (n, o) in &results {
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("total {:.0}s", total.elapsed().as_secs_f64());
    if results.iter().any(|(_, o)| !o.pass) {
        std::process::exit(1);
    }
}
