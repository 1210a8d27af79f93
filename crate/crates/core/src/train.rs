//! Generic mini-batch training loop, early stopping and fold bookkeeping.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::optim::{lr_schedule, Adam, AdamConfig};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.99,
            max_epochs: 150,
            patience: 30,
            batch_size: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config("lr and lr_decay must be positive".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs, patience and batch_size must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// Whether a larger or smaller validation metric is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    pub fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Direction::Maximize => candidate > incumbent,
            Direction::Minimize => candidate < incumbent,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub direction: Direction,
    pub best: Option<f64>,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, direction: Direction) -> Self {
        Self {
            patience,
            direction,
            best: None,
            best_epoch: 0,
        }
    }

    /// Records an epoch's metric; true when it is a new best. NaN never is.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        let improved = !metric.is_nan()
            && match self.best {
                None => true,
                Some(b) => self.direction.better(metric, b),
            };
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
        }
        improved
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best.is_some() && epoch - self.best_epoch >= self.patience
    }
}

/// A training problem over `len()` samples.
pub trait Objective {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean loss over `batch` and its gradients.
    fn batch(&mut self, params: &ParamStore, batch: &[usize], epoch: usize) -> Result<(f64, Gradients)>;

    /// Validation metric used for model selection.
    fn validate(&self, params: &ParamStore) -> Result<f64>;

    fn direction(&self) -> Direction;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub params: ParamStore,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
}

/// Mixes a base seed with two indices into an independent stream seed.
pub fn sample_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ epoch) ^ index)
}

/// Runs `f` over `indices` in parallel and returns results in input order.
pub fn per_sample<T: Send>(indices: &[usize], f: impl Fn(usize, usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    indices
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| f(pos, i))
        .collect()
}

/// Sums per-sample `(loss, grads)` pairs in order.
pub fn reduce_grads(parts: Vec<(f64, Gradients)>) -> (f64, Gradients) {
    let mut loss = 0.0;
    let mut total = Gradients::new();
    for (l, g) in parts {
        loss += l;
        total.merge(g);
    }
    (loss, total)
}

/// Shuffled mini-batch order for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch as u64, u64::MAX));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Adam over shuffled mini-batches with per-epoch lr decay, validation every
/// epoch and early stopping. Only parameters accepted by `trainable` move.
pub fn train(
    objective: &mut dyn Objective,
    mut params: ParamStore,
    cfg: &TrainConfig,
    seed: u64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = objective.len();
    if n == 0 {
        return Err(Error::Empty("training set is empty".into()));
    }
    let mut opt = Adam::new(cfg.adam);
    let mut stopper = EarlyStopping::new(cfg.patience, objective.direction());
    let mut best_params = params.clone();
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(cfg.lr, cfg.lr_decay, epoch);
        let mut loss_sum = 0.0;
        for (bi, batch) in epoch_batches(n, cfg.batch_size, seed, epoch).into_iter().enumerate() {
            let (loss, mut grads) = objective.batch(&params, &batch, epoch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss });
            }
            grads.grads.retain(|k, _| trainable(k));
            opt.update(&mut params, &grads, lr);
            loss_sum += loss * batch.len() as f64;
        }
        let val_metric = objective.validate(&params)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n as f64,
            val_metric,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train loss {:.6} val {:.6}",
            record.train_loss,
            val_metric
        );
        history.push(record);
        if stopper.observe(epoch, val_metric) {
            best_params = params.clone();
        }
        if stopper.should_stop(epoch) {
            log::info!("early stop at epoch {epoch}, best epoch {}", stopper.best_epoch);
            break;
        }
    }
    Ok(TrainOutcome {
        params: best_params,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best.unwrap_or(f64::NAN),
        history,
    })
}

/// Partition of subject ids into `k` folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
}

/// Subject ids of one fold rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Deterministic shuffled partition into `k` folds whose sizes differ by at
/// most one (larger folds first).
pub fn make_folds(subjects: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    let unique: BTreeSet<&String> = subjects.iter().collect();
    if k < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 folds, got {k}")));
    }
    if unique.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} subjects cannot fill {k} folds",
            unique.len()
        )));
    }
    let mut ids: Vec<String> = unique.into_iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let base = ids.len() / k;
    let extra = ids.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut it = ids.into_iter();
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(it.by_ref().take(size).collect());
    }
    Ok(FoldSplit { folds })
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Rotation `run`: test fold `run`, validation fold `(run + 1) mod k`,
    /// the rest for training.
    pub fn assignment(&self, run: usize) -> Result<FoldAssignment> {
        let k = self.k();
        if run >= k {
            return Err(Error::InvalidArgument(format!("fold {run} out of range for {k} folds")));
        }
        let val_fold = (run + 1) % k;
        let mut train = Vec::new();
        for (f, ids) in self.folds.iter().enumerate() {
            if f != run && f != val_fold {
                train.extend(ids.iter().cloned());
            }
        }
        Ok(FoldAssignment {
            train,
            val: self.folds[val_fold].clone(),
            test: self.folds[run].clone(),
        })
    }
}

/// `floor(ratio * n)` leading entries; ratio must lie in `(0, 1]`.
pub fn subsample<T: Clone>(items: &[T], ratio: f64) -> Result<Vec<T>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} outside (0, 1]")));
    }
    let count = (ratio * items.len() as f64 + 1e-9).floor() as usize;
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} of {} samples leaves none for training",
            items.len()
        )));
    }
    Ok(items[..count].to_vec())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;

    #[test]
    fn patience_arithmetic() {
        let mut s = EarlyStopping::new(30, Direction::Maximize);
        let mut stopped = None;
        for epoch in 0..150 {
            let metric = match epoch {
                0 => 0.5,
                5 => 0.9,
                _ => 0.1,
            };
            s.observe(epoch, metric);
            if s.should_stop(epoch) {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(35));
        assert_eq!(s.best_epoch, 5);
    }

    struct Scripted {
        metrics: Vec<f64>,
        epoch: std::cell::Cell<usize>,
    }

    impl Objective for Scripted {
        fn len(&self) -> usize {
            1
        }
        fn batch(&mut self, _: &ParamStore, _: &[usize], epoch: usize) -> Result<(f64, Gradients)> {
            self.epoch.set(epoch);
            let mut g = Gradients::new();
            g.add("w", &ArrayD::ones(IxDyn(&[1])));
            Ok((1.0, g))
        }
        fn validate(&self, _: &ParamStore) -> Result<f64> {
            Ok(self.metrics[self.epoch.get()])
        }
        fn direction(&self) -> Direction {
            Direction::Maximize
        }
    }

    #[test]
    fn train_returns_best_epoch_parameters() {
        let mut metrics = vec![0.1; 150];
        metrics[0] = 0.5;
        metrics[5] = 0.9;
        let mut obj = Scripted {
            metrics,
            epoch: 0.into(),
        };
        let mut params = ParamStore::new();
        params.insert("w", ArrayD::zeros(IxDyn(&[1])));
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        let out = train(&mut obj, params, &cfg, 0, &|_| true).unwrap();
        assert_eq!(out.history.len(), 36);
        assert_eq!(out.best_epoch, 5);
        assert_eq!(out.best_metric, 0.9);
        // Six Adam steps of size ~lr against a constant gradient.
        let w = out.params.get("w").unwrap()[0];
        assert!(w < 0.0 && w > -7e-4, "{w}");
        assert!(out.history.iter().all(|r| r.val_metric <= out.best_metric));
    }

    #[test]
    fn nonfinite_loss_aborts() {
        struct Bad;
        impl Objective for Bad {
            fn len(&self) -> usize {
                2
            }
            fn batch(&mut self, _: &ParamStore, _: &[usize], _: usize) -> Result<(f64, Gradients)> {
                Ok((f64::NAN, Gradients::new()))
            }
            fn validate(&self, _: &ParamStore) -> Result<f64> {
                Ok(0.0)
            }
            fn direction(&self) -> Direction {
                Direction::Minimize
            }
        }
        let err = train(&mut Bad, ParamStore::new(), &TrainConfig::default(), 0, &|_| true).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, .. }));
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn folds_partition() {
        let f = make_folds(&ids(10), 5, 1).unwrap();
        assert!(f.folds.iter().all(|x| x.len() == 2));
        assert_eq!(f, make_folds(&ids(10), 5, 1).unwrap());
        let f = make_folds(&ids(103), 5, 7).unwrap();
        let sizes: Vec<usize> = f.folds.iter().map(|x| x.len()).collect();
        assert_eq!(sizes, vec![21, 21, 21, 20, 20]);
        let all: BTreeSet<&String> = f.folds.iter().flatten().collect();
        assert_eq!(all.len(), 103);
        assert!(make_folds(&ids(4), 5, 0).is_err());
    }

    #[test]
    fn rotation_convention() {
        let f = make_folds(&ids(10), 5, 3).unwrap();
        let a = f.assignment(4).unwrap();
        assert_eq!(a.test, f.folds[4]);
        assert_eq!(a.val, f.folds[0]);
        assert_eq!(a.train.len(), 6);
        assert!(f.assignment(5).is_err());
    }

    #[test]
    fn subsample_counts() {
        let items: Vec<usize> = (0..300).collect();
        assert_eq!(subsample(&items, 0.1).unwrap().len(), 30);
        assert_eq!(subsample(&items, 0.7).unwrap().len(), 210);
        assert_eq!(subsample(&items, 1.0).unwrap().len(), 300);
        assert!(subsample(&items, 0.0).is_err());
        assert!(subsample(&items, 1.5).is_err());
    }

    #[test]
    fn mean_std_arithmetic() {
        let (m, s) = mean_std(&[0.80, 0.82, 0.78, 0.84, 0.76]);
        assert!((m - 0.80).abs() < 1e-12);
        assert!((s - 0.0008f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.7; 5]).1, 0.0);
    }

    #[test]
    fn batches_deterministic_and_cover() {
        let a = epoch_batches(23, 10, 5, 2);
        assert_eq!(a, epoch_batches(23, 10, 5, 2));
        assert_ne!(a, epoch_batches(23, 10, 5, 3));
        assert_eq!(a.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![10, 10, 3]);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn rotations_never_leak(n in 5usize..60, seed in 0u64..1000, run in 0usize..5) {
            let f = make_folds(&ids(n), 5, seed).unwrap();
            let a = f.assignment(run).unwrap();
            let tr: BTreeSet<_> = a.train.iter().collect();
            let va: BTreeSet<_> = a.val.iter().collect();
            let te: BTreeSet<_> = a.test.iter().collect();
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
        }
    }
}
