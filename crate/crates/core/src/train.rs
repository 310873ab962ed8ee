//! Mini-batch SGD training, evaluation and resumable trainer state.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::Network;
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::data::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, DecayPolicy, Mode, Sgd};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Name under which the divergence reference loss travels in checkpoints.
const INITIAL_LOSS: &str = "__trainer__/initial_loss";
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, factor)`: from 0-based `epoch` on, the rate is multiplied by
    /// `factor` (cumulatively with earlier entries).
    pub schedule: Vec<(usize, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: Augment,
    pub decay_policy: DecayPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk(10)
    }
}

impl TrainConfig {
    /// lr 0.1, momentum 0.9, weight decay 1e-4, ×0.1 at 60% and 90% of
    /// `epochs`, batch 64.
    pub fn desk(epochs: usize) -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: step_schedule(epochs, &[0.6, 0.9], 0.1),
            epochs,
            batch_size: 64,
            seed: 1,
            augment: Augment::default(),
            decay_policy: DecayPolicy::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        for (name, v) in [
            ("train.lr0", self.lr0),
            ("train.momentum", self.momentum),
            ("train.weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    name,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::config(
                "train.schedule",
                "epochs must be strictly increasing",
            ));
        }
        if let Some((_, f)) = self
            .schedule
            .iter()
            .find(|(_, f)| !(f.is_finite() && *f >= 0.0))
        {
            return Err(Error::config(
                "train.schedule",
                format!("invalid factor {f}"),
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr0, |lr, (_, f)| lr * f)
    }
}

/// Milestones at the given fractions of `epochs` (rounded down, deduplicated,
/// kept inside `1..epochs`).
pub fn step_schedule(epochs: usize, fractions: &[f64], factor: f64) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for f in fractions {
        let e = (f * epochs as f64 + 1e-9).floor() as usize;
        if e >= 1 && e < epochs && out.last().is_none_or(|(l, _)| *l < e) {
            out.push((e, factor));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,train_top1,val_top1,val_top5";

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.8},{:.9},{:.6},{},{}",
                r.epoch,
                r.lr,
                r.train_loss,
                r.train_top1,
                opt(r.val_top1),
                opt(r.val_top5)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }
}

/// Position of the true label when logits are ranked descending, ties going
/// to the lower index.
pub fn label_rank<T: Scalar>(row: &[T], label: usize) -> usize {
    let y = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > y || (v == y && j < label))
        .count()
}

/// Number of rows of `N×K` logits whose label is among the `k` largest.
pub fn topk_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize], k: usize) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| label_rank(row, l) < k)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
}

/// Inference-mode accuracy and mean loss; never augments.
pub fn evaluate<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalReport> {
    let (mut hits1, mut hits5, mut loss) = (0usize, 0usize, 0.0f64);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let logits = net.forward(&x.cast(), Mode::Eval)?;
        let (l, _) = nn::softmax_cross_entropy(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        hits1 += topk_hits(&logits, &labels, 1);
        hits5 += topk_hits(&logits, &labels, 5);
    }
    let n = data.len().max(1) as f64;
    Ok(EvalReport {
        top1: hits1 as f64 / n,
        top5: hits5 as f64 / n,
        loss: loss / n,
    })
}

/// Training state that can be checkpointed between epochs.
pub struct Trainer {
    pub net: Network<f32>,
    pub opt: Sgd<f32>,
    pub cfg: TrainConfig,
    rng: Rng,
    epoch: usize,
    initial_loss: Option<f64>,
    pub log: TrainLog,
}

impl Trainer {
    pub fn new(mut net: Network<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        net.apply_decay_policy(cfg.decay_policy);
        Ok(Trainer {
            net,
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            rng: Rng::new(cfg.seed).fork(1),
            epoch: 0,
            initial_loss: None,
            log: TrainLog::default(),
            cfg,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// One pass over `train` in a freshly shuffled order, then evaluation on
    /// `val` if given.
    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<EpochRecord> {
        let lr = self.cfg.lr_at(self.epoch);
        let order = self.rng.permutation(train.len());
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let (mut x, labels) = train.batch(chunk)?;
            self.cfg.augment.apply(&mut x, &mut self.rng);
            let logits = match self.net.forward(&x, Mode::Train) {
                Ok(l) => l,
                Err(Error::NumericOverflow(_)) => {
                    return Err(Error::Diverged {
                        epoch: self.epoch + 1,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let (loss, dlogits) = nn::softmax_cross_entropy(&logits, &labels)?;
            self.initial_loss.get_or_insert(loss);
            loss_sum += loss * chunk.len() as f64;
            hits += topk_hits(&logits, &labels, 1);
            self.net.backward(&dlogits)?;
            self.opt.step(self.net.params_mut(), lr)?;
        }
        let n = train.len() as f64;
        let train_loss = loss_sum / n;
        let limit = DIVERGENCE_FACTOR * self.initial_loss.unwrap_or(f64::INFINITY);
        if !train_loss.is_finite() || train_loss > limit {
            return Err(Error::Diverged {
                epoch: self.epoch + 1,
                loss: train_loss,
            });
        }
        let (val_top1, val_top5) = match val {
            Some(v) => {
                let r = evaluate(&mut self.net, v, self.cfg.batch_size)?;
                (Some(r.top1), Some(r.top5))
            }
            None => (None, None),
        };
        self.epoch += 1;
        let rec = EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss,
            train_top1: hits as f64 / n,
            val_top1,
            val_top5,
        };
        log::info!(
            "epoch {} lr {:.4} loss {:.4} top1 {:.3}",
            rec.epoch,
            rec.lr,
            rec.train_loss,
            rec.train_top1
        );
        self.log.rows.push(rec);
        Ok(rec)
    }

    /// Runs epochs until `until` (exclusive upper bound on completed epochs,
    /// capped at the configured total).
    pub fn run_until(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        until: usize,
    ) -> Result<&TrainLog> {
        while self.epoch < until.min(self.cfg.epochs) {
            self.run_epoch(train, val)?;
        }
        Ok(&self.log)
    }

    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<&TrainLog> {
        self.run_until(train, val, self.cfg.epochs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = model_tensors(&self.net);
        if let Some(l) = self.initial_loss {
            tensors.push(NamedTensor::new(INITIAL_LOSS, &[1], vec![l as f32]));
        }
        let optimizer = self
            .opt
            .velocity()
            .iter()
            .map(|(name, v)| NamedTensor::new(name.clone(), &[v.len()], v.clone()))
            .collect();
        Checkpoint {
            tensors,
            optimizer,
            rng: self.rng.state(),
            epoch: self.epoch as u64,
        }
    }

    /// Resumes from `ckpt`, which must hold every tensor of `net`.
    pub fn restore(mut net: Network<f32>, cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        load_model_tensors(&mut net, ckpt)?;
        let mut t = Trainer::new(net, cfg)?;
        t.initial_loss = ckpt.tensor(INITIAL_LOSS).map(|x| x.data[0] as f64);
        t.opt.set_velocity(
            ckpt.optimizer
                .iter()
                .map(|o| (o.name.clone(), o.data.clone()))
                .collect(),
        );
        t.rng = Rng::from_state(ckpt.rng);
        t.epoch = ckpt.epoch as usize;
        Ok(t)
    }
}

/// Parameters then buffers (batch-norm running statistics), in registry order.
pub fn model_tensors(net: &Network<f32>) -> Vec<NamedTensor> {
    let params = net.params().into_iter().map(|p| (&p.name, &p.value));
    let buffers = net.buffers().into_iter().map(|b| (&b.name, &b.value));
    params
        .chain(buffers)
        .map(|(n, t)| NamedTensor::new(n.clone(), t.shape(), t.data().to_vec()))
        .collect()
}

/// Copies checkpoint tensors into `net`, failing on the first tensor that is
/// missing or has the wrong shape.
pub fn load_model_tensors(net: &mut Network<f32>, ckpt: &Checkpoint) -> Result<()> {
    let copy = |name: &String, value: &mut Tensor<f32>| -> Result<()> {
        let src = ckpt
            .tensor(name)
            .filter(|t| t.shape == value.shape())
            .ok_or_else(|| Error::CheckpointMismatch(name.clone()))?;
        value.data_mut().copy_from_slice(&src.data);
        Ok(())
    };
    for p in net.params_mut() {
        copy(&p.name, &mut p.value)?;
    }
    for b in net.buffers_mut() {
        copy(&b.name, &mut b.value)?;
    }
    let known = model_tensors(net);
    if let Some(extra) = ckpt
        .tensors
        .iter()
        .find(|t| !t.name.starts_with("__") && !known.iter().any(|m| m.name == t.name))
    {
        return Err(Error::CheckpointMismatch(extra.name.clone()));
    }
    Ok(())
}

/// Trains a freshly built network for the full schedule.
pub fn train(
    net: Network<f32>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: TrainConfig,
) -> Result<(Network<f32>, TrainLog)> {
    let mut t = Trainer::new(net, cfg)?;
    t.run(data, val)?;
    Ok((t.net, t.log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_and_lr() {
        let cfg = TrainConfig::desk(10);
        assert_eq!(cfg.schedule, vec![(6, 0.1), (9, 0.1)]);
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(6) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(9) - 0.001).abs() < 1e-15);
        assert_eq!(step_schedule(4, &[0.6, 0.9], 0.1), vec![(2, 0.1), (3, 0.1)]);
        let mut bad = cfg.clone();
        bad.schedule = vec![(5, 0.1), (5, 0.1)];
        assert!(bad.validate().is_err());
        bad.schedule.clear();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn topk_one_hot_and_ties() {
        let logits = Tensor::from_f64_slice(&[2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(topk_hits::<f64>(&logits, &[1, 0], 1), 2);
        let flat = Tensor::<f64>::zeros(&[4, 10]);
        assert_eq!(topk_hits(&flat, &[0, 3, 0, 9], 1), 2);
        assert_eq!(topk_hits(&flat, &[0, 3, 4, 9], 5), 3);
    }

    #[test]
    fn csv_header_matches_contract() {
        let log = TrainLog {
            rows: vec![EpochRecord {
                epoch: 1,
                lr: 0.1,
                train_loss: 2.0,
                train_top1: 0.5,
                val_top1: None,
                val_top5: None,
            }],
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,lr,train_loss,train_top1,val_top1,val_top5\n"));
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "1,0.10000000,2.000000000,0.500000,,"
        );
    }
}
