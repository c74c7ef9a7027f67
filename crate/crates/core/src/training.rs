//! Pinball-loss training with per-sample random quantile draws.
//!
//! Every sample in every batch gets a fresh quantile level drawn uniformly
//! from a clipped range; the level conditions the network and sets the
//! asymmetry of the loss, so one set of weights learns the whole
//! conditional quantile function. Per-sample forward/backward passes are
//! independent and run through [`crate::par`], with RNG streams derived
//! from (seed, epoch, step, slot) so results do not depend on thread count.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasim::PairedSample;
use crate::error::{Error, Result};
use crate::numerics::{adam_update, AdamState, Tape, Tensor};
use crate::par;
use crate::qnet::QuantileModel;

/// Reject quantile levels outside the open unit interval.
pub fn check_quantile_level(q: f64) -> Result<()> {
    if !(0.0 < q && q < 1.0) || !q.is_finite() {
        return Err(Error::Domain(format!("quantile {} outside (0, 1)", q)));
    }
    Ok(())
}

/// Mean pinball loss: `q |x - xh|` where `x - xh >= 0`, else `(1-q) |x - xh|`,
/// averaged over pixels. Nonnegative; zero iff the images agree.
pub fn pinball_loss(x: &Tensor, x_hat: &Tensor, q: f64) -> Result<f64> {
    check_quantile_level(q)?;
    if !x.same_shape(x_hat) {
        return Err(Error::ShapeMismatch(format!(
            "pinball_loss: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let mut acc = 0.0;
    for (&gt, &pred) in x.data().iter().zip(x_hat.data()) {
        let d = gt - pred;
        acc += if d >= 0.0 { q * d } else { (q - 1.0) * d };
    }
    Ok(acc / x.len() as f64)
}

/// One uniform draw from `[q_min, q_max]`.
pub fn sample_quantile<R: Rng>(rng: &mut R, q_min: f64, q_max: f64) -> f64 {
    debug_assert!(0.0 < q_min && q_min < q_max && q_max < 1.0);
    rng.gen_range(q_min..=q_max)
}

/// Training hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Quantile sampling range; extreme levels are unlearnable from finite
    /// pixels and destabilize the loss, so the range is clipped.
    pub q_min: f64,
    pub q_max: f64,
    /// Emit a checkpoint every this many epochs (0 disables periodic
    /// checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            q_min: 0.005,
            q_max: 0.995,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be >= 1".into()));
        }
        if !(0.0 < self.q_min && self.q_min < self.q_max && self.q_max < 1.0) {
            return Err(Error::Usage(format!(
                "quantile range ({}, {}) must satisfy 0 < q_min < q_max < 1",
                self.q_min, self.q_max
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_pinball: f64,
    /// MSE of the q = 0.5 query on the validation split; absent when the
    /// validation set is empty.
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
}

impl TrainStats {
    /// Write the `(epoch, mean_pinball, val_mse)` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["epoch", "mean_pinball", "val_mse"])?;
        for e in &self.epochs {
            let val = e.val_mse.map_or(String::new(), |v| format!("{}", v));
            writer.write_record([e.epoch.to_string(), e.mean_pinball.to_string(), val])?;
        }
        writer.flush()?;
        Ok(())
    }
}

const SHUFFLE_TAG: u64 = 0x5f;
const QUANTILE_TAG: u64 = 0x71;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Independent RNG stream for one (epoch, step, slot) coordinate.
fn stream_seed(seed: u64, tag: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = splitmix64(seed ^ tag);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    splitmix64(h ^ c)
}

/// Fit the model in place. Per batch: draw one quantile per sample,
/// average the per-sample pinball gradients, take one Adam step. Emits a
/// checkpoint every `checkpoint_every` epochs when `checkpoint_dir` is
/// given. Deterministic for a fixed config.
pub fn train(
    model: &mut QuantileModel,
    train_set: &[PairedSample],
    val_set: &[PairedSample],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainStats> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }

    let mut params = model.parameter_tensors();
    let mut adam = AdamState::new(&params, config.lr);
    let mut stats = TrainStats::default();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(config.seed, SHUFFLE_TAG, epoch as u64, 0, 0));
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;

        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            // One fresh quantile per sample per step; streams are keyed by
            // slot index so parallel execution cannot reorder draws.
            let draws: Vec<(usize, f64)> = batch
                .iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                        config.seed,
                        QUANTILE_TAG,
                        epoch as u64,
                        step as u64,
                        slot as u64,
                    ));
                    (idx, sample_quantile(&mut rng, config.q_min, config.q_max))
                })
                .collect();

            let per_sample: Vec<Result<(f64, Vec<Tensor>)>> =
                par::map_slice(&draws, |&(idx, q)| {
                    let sample = &train_set[idx];
                    let mut tape = Tape::new();
                    let (out, param_ids) = model.forward_on_tape(&mut tape, &sample.y, q)?;
                    let loss = tape.pinball_mean(out, &sample.x, q)?;
                    let loss_val = tape.value(loss).data()[0];
                    tape.backward(loss)?;
                    let grads = param_ids
                        .iter()
                        .map(|&id| tape.grad_tensor(id).expect("backward ran"))
                        .collect();
                    Ok((loss_val, grads))
                });

            let mut grad_acc: Vec<Tensor> =
                params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            let mut batch_loss = 0.0;
            let count = per_sample.len();
            for result in per_sample {
                let (loss_val, grads) = result?;
                batch_loss += loss_val;
                for (acc, g) in grad_acc.iter_mut().zip(&grads) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / count as f64;
            batch_loss *= scale;
            for g in &mut grad_acc {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    value: batch_loss,
                    epoch,
                    step,
                });
            }
            loss_sum += batch_loss * count as f64;
            loss_count += count;

            adam_update(&mut params, &grad_acc, &mut adam)?;
            model.set_parameters(&params)?;
        }

        let val_mse = if val_set.is_empty() {
            None
        } else {
            let errs: Vec<Result<f64>> = par::map_slice(val_set, |s| {
                let pred = model.forward(&s.y, 0.5)?;
                let mse = pred
                    .data()
                    .iter()
                    .zip(s.x.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / pred.len() as f64;
                Ok(mse)
            });
            let mut total = 0.0;
            for e in errs {
                total += e?;
            }
            Some(total / val_set.len() as f64)
        };

        stats.epochs.push(EpochStats {
            epoch,
            mean_pinball: loss_sum / loss_count as f64,
            val_mse,
        });

        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                model.save(&dir.join(format!("model_epoch_{:04}.qutc", epoch + 1)))?;
            }
        }
    }
    Ok(stats)
}
