use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::optim::AdamW;
use crate::data::{augment, BinaryMask, LabelSet, Sample};
use crate::error::{Error, Result};
use crate::losses::{total_loss_vars, LossBreakdown};
use crate::model::Model;
use crate::numerics::{Tape, Tensor};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
}

impl TrainOutcome {
    /// Mean of a per-step quantity over the steps of one epoch.
    pub fn epoch_mean(&self, epoch: usize, f: impl Fn(&LossBreakdown) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.log.iter().filter(|s| s.epoch == epoch).map(|s| f(&s.breakdown)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn loss_log_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,l_ab,l_pn,l_bound,l_union,l_amse,total\n");
    for e in log {
        let b = &e.breakdown;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.step, b.l_ab, b.l_pn, b.l_bound, b.l_union, b.l_amse, b.total
        );
    }
    s
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: u64,
    epoch: usize,
    batch_ids: &'a [String],
    breakdown: LossBreakdown,
}

/// Stream of per-epoch sample orders and augmentations, independent of model init.
fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn check_dataset(samples: &[Sample], config: &TrainConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let d = config.model.num_classes;
    let size = config.model.backbone.input_size;
    for s in samples {
        if s.labels.len() != d {
            return Err(Error::Shape(format!("{}: {} labels, model has {d} classes", s.id, s.labels.len())));
        }
        if s.image_size() != size {
            return Err(Error::Shape(format!("{}: image {:?}, model expects {size:?}", s.id, s.image_size())));
        }
    }
    Ok(())
}

/// Minimizes the weighted objective with AdamW. With `out`, writes the checkpoint
/// (every epoch) and the per-step loss log under that directory.
pub fn train(samples: &[Sample], config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(samples, config)?;
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let mut opt = AdamW::new(config.optimizer, &model.params);
    let mut rng = data_rng(config.seed);
    let arch = config.ablation_flags.arch();
    let weights = config.effective_weights();
    let d = config.model.num_classes;
    let image_size = config.model.backbone.input_size;
    let (fh, fw) = model.feature_size();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if config.augment {
                        augment(&samples[i], &mut rng)
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            let images = Tensor::stack(&batch.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
            let labels: Vec<LabelSet> = batch.iter().map(|s| s.labels.clone()).collect();
            let masks: Vec<Vec<Option<BinaryMask>>> = batch
                .iter()
                .map(|s| (0..d).map(|k| if s.labels.get(k) { s.mask(k) } else { None }).collect())
                .collect();

            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &images, arch, true)?;
            let vars = total_loss_vars(&mut tape, &fwd.heads, &labels, &masks, &weights, image_size)?;
            let breakdown = vars.breakdown(&tape, &labels);
            let step = opt.steps() + 1;
            if !breakdown.total.is_finite() {
                let ids: Vec<String> = batch.iter().map(|s| s.id.clone()).collect();
                if let Some(dir) = out {
                    let dump = NonFiniteDump {
                        step,
                        epoch,
                        batch_ids: &ids,
                        breakdown,
                    };
                    fs::write(dir.join(NONFINITE_DUMP), serde_json::to_vec_pretty(&dump)?)?;
                }
                return Err(Error::NonFiniteLoss {
                    step,
                    value: breakdown.total,
                    batch_ids: ids,
                });
            }
            let recomposed = breakdown.recompose(&weights);
            assert!(
                (recomposed - breakdown.total).abs() <= 1e-12,
                "step {step}: total {} != recomposed {recomposed}",
                breakdown.total
            );
            log.push(StepLog { step, epoch, breakdown });

            tape.backward(vars.total)?;
            let grads: Vec<Tensor> = fwd.params.grads(&tape).into_iter().map(|(_, g)| g).collect();
            opt.step(&mut model.params, &grads, lr);
            if let Some(stats) = &fwd.bn_stats {
                model.update_running_stats(stats, batch.len() * fh * fw);
            }
        }
        if let Some(dir) = out {
            save_checkpoint(&dir.join(CHECKPOINT_DIR), &model, config, opt.steps(), epoch + 1)?;
            fs::write(dir.join(LOSS_LOG), loss_log_csv(&log))?;
        }
    }
    Ok(TrainOutcome { model, log })
}
