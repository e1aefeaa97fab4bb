//! Mini-batch gradient descent for the biasing module.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    batch_loss, grad, LossConfig, LossMode, LossReport, TrainExample, DEFAULT_ALPHA,
};
use crate::metrics::GateCounts;
use crate::pointer::PgParams;
use crate::seeding::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub alpha: f64,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub patience: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Token embedding width of the module.
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::TwoLoss,
            alpha: DEFAULT_ALPHA,
            lr: 0.5,
            lr_decay_factor: 0.5,
            patience: 2,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            embed_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        LossConfig::new(self.mode, self.alpha)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mode: self.mode,
            alpha: self.alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Per-utterance means over the training split after the epoch.
    pub l_gen: f64,
    pub l_ptr: f64,
    pub l_asr: f64,
    /// Dev gate rates in percent, from teacher-forced passes.
    pub dev_far: f64,
    pub dev_tar: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub dev_loss: f64,
    /// Mean norm of the batch gradients applied during the epoch.
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PgParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Norm of the mean training-split gradient at initialization.
    pub initial_grad_norm: f64,
    /// Epoch at which a non-finite loss stopped training, if any.
    pub diverged: Option<usize>,
}

#[derive(Serialize)]
struct StepTrace<'a> {
    epoch: usize,
    step: usize,
    lr: f64,
    grad_norm: f64,
    #[serde(flatten)]
    loss: &'a LossReport,
}

/// Dev split = last 10% of a seeded permutation (at least one example when
/// there are two or more).
pub fn split_train_dev(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &["split"]));
    let n_dev = match n {
        0 | 1 => 0,
        _ => (n / 10).max(1),
    };
    let dev = order.split_off(n - n_dev);
    (order, dev)
}

pub fn gate_counts(params: &PgParams, examples: &[&TrainExample]) -> Result<GateCounts> {
    let mut counts = GateCounts::default();
    for ex in examples {
        let steps = ex.forward(params)?;
        let gates: Vec<(f64, bool)> = steps.iter().map(|s| (s.p_gen, s.is_active())).collect();
        counts.add(&GateCounts::tally(&gates, &ex.mask));
    }
    Ok(counts)
}

fn mean_report(
    params: &PgParams,
    examples: &[&TrainExample],
    config: &LossConfig,
) -> Result<LossReport> {
    let mut r = batch_loss(params, examples, config)?;
    let n = examples.len().max(1) as f64;
    r.l_asr /= n;
    r.l_gen /= n;
    r.l_ptr /= n;
    r.total /= n;
    Ok(r)
}

/// Trains from a seeded initialization.
pub fn train(
    examples: &[TrainExample],
    vocab_size: usize,
    config: &TrainConfig,
    trace: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let d_h = examples
        .first()
        .and_then(|ex| ex.h_dec_seq.first())
        .map(Vec::len)
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let params = PgParams::init(config.seed, vocab_size, config.embed_dim, d_h)?;
    train_from(params, examples, config, trace)
}

pub fn train_from(
    mut params: PgParams,
    examples: &[TrainExample],
    config: &TrainConfig,
    mut trace: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let loss_cfg = config.loss_config();
    let (train_idx, dev_idx) = split_train_dev(examples.len(), config.seed);
    let train_set: Vec<&TrainExample> = train_idx.iter().map(|&i| &examples[i]).collect();
    let dev_set: Vec<&TrainExample> = if dev_idx.is_empty() {
        train_set.clone()
    } else {
        dev_idx.iter().map(|&i| &examples[i]).collect()
    };

    let initial_grad_norm = {
        let (g, _) = grad(&params, &train_set, &loss_cfg)?;
        g.norm() / train_set.len() as f64
    };

    let mut lr = config.lr;
    let mut best = params.clone();
    let mut best_dev = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut log = Vec::with_capacity(config.epochs);
    let mut diverged = None;

    'epochs: for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_for(config.seed, &["epoch", &epoch.to_string()]));
        let mut norm_sum = 0.0;
        let mut n_batches = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| train_set[i]).collect();
            let (mut g, report) = match grad(&params, &batch, &loss_cfg) {
                Ok(x) => x,
                Err(Error::NonFiniteGradient(_)) => {
                    diverged = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !report.total.is_finite() {
                diverged = Some(epoch);
                break 'epochs;
            }
            g.scale(1.0 / batch.len() as f64);
            let norm = g.norm();
            norm_sum += norm;
            n_batches += 1;
            if let Some(out) = trace.as_deref_mut() {
                let rec = StepTrace {
                    epoch,
                    step,
                    lr,
                    grad_norm: norm,
                    loss: &report,
                };
                serde_json::to_writer(&mut *out, &rec)?;
                out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
            }
            params.add_scaled(&g, -lr);
        }

        let train_report = mean_report(&params, &train_set, &loss_cfg)?;
        let dev_report = mean_report(&params, &dev_set, &loss_cfg)?;
        if !(train_report.total.is_finite() && dev_report.total.is_finite() && params.is_finite()) {
            diverged = Some(epoch);
            break;
        }
        let gates = gate_counts(&params, &dev_set)?;
        log.push(EpochLog {
            epoch,
            l_gen: train_report.l_gen,
            l_ptr: train_report.l_ptr,
            l_asr: train_report.l_asr,
            dev_far: gates.far().unwrap_or(0.0),
            dev_tar: gates.tar().unwrap_or(0.0),
            lr,
            dev_loss: dev_report.total,
            grad_norm: norm_sum / n_batches.max(1) as f64,
        });

        if dev_report.total < best_dev {
            best_dev = dev_report.total;
            best = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience.max(1) {
                lr *= config.lr_decay_factor;
                since_best = 0;
            }
        }
    }

    // `best` still holds the initialization when no epoch finished cleanly
    Ok(TrainOutcome {
        params: best,
        log,
        best_epoch,
        initial_grad_norm,
        diverged,
    })
}

pub const LOG_HEADER: [&str; 7] = [
    "epoch", "l_gen", "l_ptr", "l_asr", "dev_far", "dev_tar", "lr",
];

pub fn write_log_csv<W: Write>(log: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_HEADER)?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.l_gen.to_string(),
            e.l_ptr.to_string(),
            e.l_asr.to_string(),
            e.dev_far.to_string(),
            e.dev_tar.to_string(),
            e.lr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<train log>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_preconditions() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                epochs: 0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                lr: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                alpha: 1.5,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn split_sizes() {
        let (t, d) = split_train_dev(100, 3);
        assert_eq!((t.len(), d.len()), (90, 10));
        let (t2, d2) = split_train_dev(100, 3);
        assert_eq!((t, d), (t2, d2));
        assert_eq!(split_train_dev(5, 1).1.len(), 1);
        assert_eq!(split_train_dev(1, 1).1.len(), 0);
    }

    #[test]
    fn log_csv_columns() {
        let log = vec![EpochLog {
            epoch: 1,
            l_gen: 0.5,
            l_ptr: 0.25,
            l_asr: 1.0,
            dev_far: 2.0,
            dev_tar: 80.0,
            lr: 0.1,
            dev_loss: 0.7,
            grad_norm: 0.3,
        }];
        let mut buf = Vec::new();
        write_log_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "epoch,l_gen,l_ptr,l_asr,dev_far,dev_tar,lr\n1,0.5,0.25,1,2,80,0.1\n"
        );
    }
}
