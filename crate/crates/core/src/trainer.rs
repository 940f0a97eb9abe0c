//! Seeded training and evaluation of one probe.
//!
//! A [`Run`] owns the head, the optimizer state and the shuffle stream. It can
//! be advanced epoch by epoch, which is how the search resumes trials across
//! rungs: the cosine schedule always spans `cfg.epochs`, so stopping at epoch
//! 3 and continuing later gives exactly the run that never stopped.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::embedstore::{read_store, EmbeddingRecord, StoreError, StoreHeader};
use crate::heads::{Clip, HeadDims, HeadError, HeadHyper, HeadKind, HeadState};
use crate::numerics::RngStream;
use crate::objective::{asl_loss, mean_average_precision, top1_accuracy, AslConfig, ObjectiveError};
use crate::optim::{cosine_lr, AdamWConfig, AdamWState, CosineSchedule, OptimError};

/// Stream ids under one seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_SPLIT: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0} store is empty")]
    EmptyStore(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("accuracy needs exactly one label per clip; clip {id} has {count}")]
    NotSingleLabel { id: u64, count: usize },
    #[error("run log {path}: {source}")]
    Log { path: String, source: csv::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Map,
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Map => "mAP",
            Metric::Accuracy => "accuracy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub hyper: HeadHyper,
    pub epochs: usize,
    pub batch_size: usize,
    /// Shared by every tensor, prototypes included.
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub asl: AslConfig,
    pub metric: Metric,
}

impl TrainConfig {
    pub fn new(head: HeadKind, lr: f64, weight_decay: f64, seed: u64) -> Self {
        Self {
            head,
            hyper: HeadHyper::default(),
            epochs: 30,
            batch_size: 128,
            lr,
            weight_decay,
            seed,
            asl: AslConfig::default(),
            metric: Metric::Map,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(format!(
                "epochs {} and batch size {} must be positive",
                self.epochs, self.batch_size
            )));
        }
        self.asl.validate()?;
        AdamWConfig::new(self.lr, self.weight_decay).validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub clip: Clip,
    pub labels: Vec<bool>,
}

/// Decoded clips sharing one geometry. Cloning and splitting share the
/// decoded clips.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dims: HeadDims,
    examples: Vec<Arc<Example>>,
}

impl Dataset {
    pub fn from_records(header: &StoreHeader, records: &[EmbeddingRecord]) -> Result<Self> {
        let dims = HeadDims::new(
            header.dim as usize,
            header.s_t as usize,
            header.s_f as usize,
            header.classes as usize,
        );
        let examples = records
            .iter()
            .map(|r| {
                Ok(Arc::new(Example {
                    id: r.id,
                    clip: Clip::from_record(r)?,
                    labels: r.labels.clone(),
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, examples })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, records) = read_store(path)?;
        Self::from_records(&header, &records)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Arc<Example>] {
        &self.examples
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dims: self.dims,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    /// Seeded split holding out `ceil(fraction * n)` clips for validation.
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let perm = RngStream::new(seed, STREAM_SPLIT).permutation(self.len());
        let held = ((self.len() as f64 * fraction).ceil() as usize).min(self.len());
        let (val, train) = perm.split_at(held);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        (self.subset(&train), self.subset(&val))
    }

    pub fn check_compatible(&self, other: &Dataset, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(TrainError::Dimension(format!(
                "{what} store is {:?}, expected {:?}",
                other.dims, self.dims
            )));
        }
        Ok(())
    }

    /// Fraction of clips carrying each class.
    pub fn class_prior(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.dims.classes];
        for e in &self.examples {
            for (c, &y) in e.labels.iter().enumerate() {
                counts[c] += y as u8 as f64;
            }
        }
        counts.iter().map(|c| c / self.len().max(1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub per_epoch_val: Vec<f64>,
    pub final_test_metric: Option<f64>,
    pub wallclock_secs: f64,
}

impl RunResult {
    pub fn last_val(&self) -> Option<f64> {
        self.per_epoch_val.last().copied()
    }
}

/// A resumable training run.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: TrainConfig,
    pub head: HeadState,
    opt: AdamWState,
    sched: CosineSchedule,
    shuffle: RngStream,
    epoch: usize,
    step: u64,
    pub log: Vec<LogRow>,
    pub per_epoch_val: Vec<f64>,
    elapsed: f64,
}

impl Run {
    pub fn new(cfg: TrainConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyStore("training"));
        }
        let mut init = RngStream::new(cfg.seed, STREAM_INIT);
        let head = HeadState::init(cfg.head, train.dims, cfg.hyper, &mut init)?;
        let opt = AdamWState::new(&head, AdamWConfig::new(cfg.lr, cfg.weight_decay))?;
        let batches = train.len().div_ceil(cfg.batch_size) as u64;
        let sched = CosineSchedule::new(cfg.lr, batches * cfg.epochs as u64);
        Ok(Self {
            shuffle: RngStream::new(cfg.seed, STREAM_SHUFFLE),
            cfg,
            head,
            opt,
            sched,
            epoch: 0,
            step: 0,
            log: Vec::new(),
            per_epoch_val: Vec::new(),
            elapsed: 0.0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Trains until `target` epochs (capped at `cfg.epochs`) are complete,
    /// recording the validation metric after each one.
    pub fn advance_to(&mut self, target: usize, train: &Dataset, val: &Dataset) -> Result<()> {
        if train.dims != self.head.dims {
            return Err(TrainError::Dimension(format!(
                "training store is {:?}, head expects {:?}",
                train.dims, self.head.dims
            )));
        }
        train.check_compatible(val, "validation")?;
        let start = Instant::now();
        while self.epoch < target.min(self.cfg.epochs) {
            self.train_epoch(train)?;
            let metric = evaluate(&self.head, val, self.cfg.metric)?.value;
            self.per_epoch_val.push(metric);
            if let Some(row) = self.log.last_mut() {
                row.val_metric = metric;
            }
        }
        self.elapsed += start.elapsed().as_secs_f64();
        Ok(())
    }

    fn train_epoch(&mut self, train: &Dataset) -> Result<()> {
        let order = self.shuffle.permutation(train.len());
        let mut grads = self.head.zero_grads();
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for (batch, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            grads.zero();
            let scale = 1.0 / idx.len() as f64;
            let mut batch_loss = 0.0;
            for &i in idx {
                let ex = &train.examples[i];
                let out = self.head.forward(&ex.clip)?;
                let (loss, mut dl) = asl_loss(&out.logits, &ex.labels, &self.cfg.asl)?;
                batch_loss += loss * scale;
                dl.iter_mut().for_each(|g| *g *= scale);
                self.head.backward(&ex.clip, &out, &dl, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: self.epoch,
                    batch,
                });
            }
            lr = cosine_lr(self.step, &self.sched);
            self.opt.step(&mut self.head, &grads, lr)?;
            self.step += 1;
            loss_sum += batch_loss * idx.len() as f64;
        }
        self.epoch += 1;
        self.log.push(LogRow {
            epoch: self.epoch,
            step: self.step,
            lr,
            loss: loss_sum / train.len() as f64,
            val_metric: f64::NAN,
        });
        Ok(())
    }

    pub fn result(&self) -> RunResult {
        RunResult {
            seed: self.cfg.seed,
            per_epoch_val: self.per_epoch_val.clone(),
            final_test_metric: None,
            wallclock_secs: self.elapsed,
        }
    }
}

/// Trains for `cfg.epochs` epochs.
pub fn train(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(HeadState, RunResult)> {
    let mut run = Run::new(cfg.clone(), train)?;
    run.advance_to(cfg.epochs, train, val)?;
    let result = run.result();
    Ok((run.head, result))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: Metric,
    pub value: f64,
    /// Row-major `N x C` logits.
    pub scores: Vec<f64>,
}

pub fn evaluate(head: &HeadState, data: &Dataset, metric: Metric) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(TrainError::EmptyStore("evaluation"));
    }
    if data.dims != head.dims {
        return Err(TrainError::Dimension(format!(
            "store is {:?}, head expects {:?}",
            data.dims, head.dims
        )));
    }
    let c = data.dims.classes;
    let mut scores = Vec::with_capacity(data.len() * c);
    for ex in data.examples() {
        scores.extend(head.forward(&ex.clip)?.logits);
    }
    let value = match metric {
        Metric::Map => {
            let labels: Vec<bool> = data.examples().iter().flat_map(|e| e.labels.iter().copied()).collect();
            mean_average_precision(&scores, &labels, c)?
        }
        Metric::Accuracy => {
            let targets = data
                .examples()
                .iter()
                .map(|e| {
                    let on: Vec<usize> = (0..c).filter(|&k| e.labels[k]).collect();
                    match on.as_slice() {
                        [t] => Ok(*t),
                        _ => Err(TrainError::NotSingleLabel {
                            id: e.id,
                            count: on.len(),
                        }),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            top1_accuracy(&scores, &targets, c)?
        }
    };
    Ok(EvalReport { metric, value, scores })
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for one value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        // exact, where the summed mean could be off by an ulp
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone)]
pub struct MultiSeed {
    pub mean: f64,
    pub sd: f64,
    pub runs: Vec<RunResult>,
    pub heads: Vec<HeadState>,
}

/// One full run per seed; the summary is over each run's final validation
/// metric.
pub fn multi_seed(train_set: &Dataset, val: &Dataset, cfg: &TrainConfig, seeds: &[u64]) -> Result<MultiSeed> {
    let mut runs = Vec::with_capacity(seeds.len());
    let mut heads = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (head, result) = train(train_set, val, &TrainConfig { seed, ..cfg.clone() })?;
        runs.push(result);
        heads.push(head);
    }
    let finals: Vec<f64> = runs.iter().filter_map(RunResult::last_val).collect();
    let (mean, sd) = mean_sd(&finals);
    Ok(MultiSeed { mean, sd, runs, heads })
}

pub fn write_run_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let err = |source| TrainError::Log {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::{generate_synthetic, SynthSpec};

    fn small_store(seed: u64, clips: usize) -> Dataset {
        let spec = SynthSpec {
            classes: 3,
            dim: 8,
            s_t: 2,
            s_f: 2,
            min_labels: 1,
            max_labels: 2,
            num_clips: clips,
            seed,
            ..SynthSpec::default()
        };
        let records = generate_synthetic(&spec).unwrap();
        let header = StoreHeader::new(8, 2, 2, 3);
        Dataset::from_records(&header, &records).unwrap()
    }

    fn quick(kind: HeadKind, lr: f64) -> TrainConfig {
        let mut cfg = TrainConfig::new(kind, lr, 0.0, 7);
        cfg.epochs = 3;
        cfg.batch_size = 16;
        cfg.hyper.prototypes_per_class = 2;
        cfg.hyper.mlp_hidden = 8;
        cfg.hyper.conv_hidden = 4;
        cfg
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let data = small_store(0, 50);
        let (tr, va) = data.split(0.2, 4);
        assert_eq!((tr.len(), va.len()), (40, 10));
        let mut ids: Vec<u64> = tr.examples().iter().chain(va.examples()).map(|e| e.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        let (tr2, _) = data.split(0.2, 4);
        assert!(tr.examples().iter().zip(tr2.examples()).all(|(a, b)| a.id == b.id));
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let data = small_store(1, 40);
        for kind in HeadKind::ALL {
            let cfg = quick(kind, 0.0);
            let fresh = Run::new(cfg.clone(), &data).unwrap().head;
            let (head, _) = train(&data, &data, &cfg).unwrap();
            assert_eq!(head, fresh, "{kind}");
        }
    }

    #[test]
    fn same_seed_same_bits_and_resume_equals_straight_run() {
        let data = small_store(2, 60);
        let (tr, va) = data.split(0.2, 0);
        let cfg = quick(HeadKind::Protobin, 0.02);
        let (h1, r1) = train(&tr, &va, &cfg).unwrap();
        let (h2, r2) = train(&tr, &va, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(r1.per_epoch_val, r2.per_epoch_val);
        let mut run = Run::new(cfg.clone(), &tr).unwrap();
        run.advance_to(1, &tr, &va).unwrap();
        run.advance_to(3, &tr, &va).unwrap();
        run.advance_to(10, &tr, &va).unwrap();
        assert_eq!(run.head, h1);
        assert_eq!(run.per_epoch_val, r1.per_epoch_val);
        assert_eq!(run.log.len(), 3);
    }

    #[test]
    fn first_batch_loss_is_mean_of_single_examples() {
        let data = small_store(3, 20);
        let mut cfg = quick(HeadKind::Mlp, 0.01);
        cfg.batch_size = 20;
        cfg.epochs = 1;
        let mut run = Run::new(cfg.clone(), &data).unwrap();
        let head = run.head.clone();
        run.advance_to(1, &data, &data).unwrap();
        let expect: f64 = data
            .examples()
            .iter()
            .map(|e| asl_loss(&head.forward(&e.clip).unwrap().logits, &e.labels, &cfg.asl).unwrap().0)
            .sum::<f64>()
            / 20.0;
        assert!((run.log[0].loss - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_stores() {
        let data = small_store(4, 10);
        let head = Run::new(quick(HeadKind::Linear, 0.1), &data).unwrap().head;
        let empty = data.subset(&[]);
        assert!(matches!(evaluate(&head, &empty, Metric::Map), Err(TrainError::EmptyStore(_))));
        let mut other = data.clone();
        other.dims.dim = 4;
        assert!(matches!(evaluate(&head, &other, Metric::Map), Err(TrainError::Dimension(_))));
        assert!(matches!(
            evaluate(&head, &data, Metric::Accuracy),
            Err(TrainError::NotSingleLabel { .. }) | Ok(_)
        ));
    }

    #[test]
    fn mean_sd_oracle() {
        assert_eq!(mean_sd(&[7.0, 7.0, 7.0]), (7.0, 0.0));
        let v = [0.61, 0.58, 0.64, 0.6, 0.57];
        let (m, s) = mean_sd(&v);
        // two-pass reference
        let mean = v.iter().sum::<f64>() / 5.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((m - mean).abs() < 1e-15 && (s - var.sqrt()).abs() < 1e-15);
        let mut r = v;
        r.reverse();
        let (m2, s2) = mean_sd(&r);
        assert!((m - m2).abs() < 1e-15 && (s - s2).abs() < 1e-15);
    }
}
