//! The configuration lattice from plain dilated backbone up to the full model, each
//! trained with a shared seed and scored on a held-out set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{AblationFlags, TrainConfig};
use super::refine::assert_disjoint;
use super::train::train;
use crate::data::{generate_synthetic, Sample, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, CriterionKind, LocalizationCriterion, DEFAULT_BIN_THRESHOLD};
use crate::model::Pooling;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config: TrainConfig,
}

pub const ROW_NAMES: [&str; 8] = [
    "RN50-8-GAP",
    "RN50-8-LSE",
    "+FAB-C",
    "+FAB-P",
    "+FAB",
    "+FAB+PA",
    "+FAB+PA+Bound",
    "+FAB+PA+ABU",
];

/// Flags for a named lattice row; `use_amse` is taken from `base`.
pub fn row_flags(name: &str, base: &AblationFlags) -> Result<AblationFlags> {
    let none = AblationFlags {
        use_fab: false,
        use_channel_attn: false,
        use_position_attn: false,
        use_positive_head: false,
        use_bound: false,
        use_union: false,
        use_amse: base.use_amse,
        pooling: Pooling::Lse,
    };
    let fab = AblationFlags {
        use_fab: true,
        use_channel_attn: true,
        use_position_attn: true,
        ..none
    };
    let pa = AblationFlags {
        use_positive_head: true,
        ..fab
    };
    Ok(match name {
        "RN50-8-GAP" => AblationFlags {
            pooling: Pooling::Gap,
            ..none
        },
        "RN50-8-LSE" => none,
        "+FAB-C" => AblationFlags {
            use_position_attn: false,
            ..fab
        },
        "+FAB-P" => AblationFlags {
            use_channel_attn: false,
            ..fab
        },
        "+FAB" => fab,
        "+FAB+PA" => pa,
        "+FAB+PA+Bound" => AblationFlags { use_bound: true, ..pa },
        "+FAB+PA+ABU" => AblationFlags {
            use_bound: true,
            use_union: true,
            ..pa
        },
        other => return Err(Error::Config(format!("unknown ablation row {other}"))),
    })
}

pub fn lattice(base: &TrainConfig, names: &[&str]) -> Result<Vec<AblationRow>> {
    names
        .iter()
        .map(|&name| {
            Ok(AblationRow {
                name: name.to_string(),
                config: TrainConfig {
                    ablation_flags: row_flags(name, &base.ablation_flags)?,
                    ..base.clone()
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
    /// Correct ratio per class at IoU > 0.1.
    pub ratio: Vec<Option<f64>>,
    pub mean_ratio: Option<f64>,
    pub final_l_ab: Option<f64>,
}

pub const ABLATION_IOU: f64 = 0.1;

pub fn run_rows(train_set: &[Sample], eval_set: &[Sample], rows: &[AblationRow], bin_threshold: f64) -> Result<Vec<AblationResult>> {
    assert_disjoint(train_set, eval_set);
    let criterion = LocalizationCriterion::iou(ABLATION_IOU)?;
    rows.iter()
        .map(|row| {
            let outcome = train(train_set, &row.config, None)?;
            let report = evaluate(
                &outcome.model,
                row.config.ablation_flags.arch(),
                eval_set,
                &[criterion],
                bin_threshold,
                None,
            )?;
            let loc = report
                .report_for(CriterionKind::IoU, ABLATION_IOU)
                .expect("criterion was requested");
            Ok(AblationResult {
                name: row.name.clone(),
                auc: report.auc.clone(),
                mean_auc: report.mean_auc,
                ratio: loc.classes.iter().map(|c| c.ratio).collect(),
                mean_ratio: loc.mean,
                final_l_ab: outcome.epoch_mean(row.config.epochs - 1, |b| b.l_ab),
            })
        })
        .collect()
}

/// `config,mean_auc,auc_<class>...,ratio_<class>...,mean_ratio` in row order.
pub fn results_csv(results: &[AblationResult]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let d = results.first().map_or(0, |r| r.auc.len());
    let mut s = String::from("config,mean_auc");
    for k in 0..d {
        let _ = write!(s, ",auc_{}", crate::evaluation::class_name(k));
    }
    for k in 0..d {
        let _ = write!(s, ",ratio_{}", crate::evaluation::class_name(k));
    }
    s.push_str(",mean_ratio\n");
    for r in results {
        let _ = write!(s, "{},{}", r.name, opt(r.mean_auc));
        for a in &r.auc {
            let _ = write!(s, ",{}", opt(*a));
        }
        for a in &r.ratio {
            let _ = write!(s, ",{}", opt(*a));
        }
        let _ = writeln!(s, ",{}", opt(r.mean_ratio));
    }
    s
}

/// Training/evaluation data plus the training recipe shared by every row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: SyntheticConfig,
    pub eval_count: usize,
    #[serde(default = "default_bin_threshold")]
    pub bin_threshold: f64,
    /// Subset of lattice rows to run, in order; all rows when absent.
    #[serde(default)]
    pub rows: Option<Vec<String>>,
}

fn default_bin_threshold() -> f64 {
    DEFAULT_BIN_THRESHOLD
}

impl ExperimentConfig {
    /// Training samples keep `data.annotated_fraction` of their boxes; the evaluation
    /// set is drawn from an independent seed and keeps all of them.
    pub fn datasets(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let train = generate_synthetic(&self.data)?;
        let eval = generate_synthetic(&SyntheticConfig {
            count: self.eval_count,
            annotated_fraction: 1.0,
            seed: self.data.seed.wrapping_add(0x5eed),
            ..self.data.clone()
        })?;
        Ok((train, eval))
    }

    pub fn rows(&self) -> Result<Vec<AblationRow>> {
        match &self.rows {
            Some(names) => lattice(&self.train, &names.iter().map(String::as_str).collect::<Vec<_>>()),
            None => lattice(&self.train, &ROW_NAMES),
        }
    }
}

pub fn run_ablation(config: &ExperimentConfig) -> Result<Vec<AblationResult>> {
    let (train_set, eval_set) = config.datasets()?;
    run_rows(&train_set, &eval_set, &config.rows()?, config.bin_threshold)
}
