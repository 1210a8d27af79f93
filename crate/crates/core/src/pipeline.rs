//! Stage drivers: encoder and transformer pre-training, fine-tuning on one
//! fold rotation, and cross-validation. Each produces a checkpoint and/or a
//! metric report.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{view2, Gradients, Tape};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::dataset::{select_subjects, Sample};
use crate::encoder::{adapt_input_channels, init_encoder, stored_in_channels};
use crate::error::{Error, Result};
use crate::heads::{
    argmax_labels, init_model, model_forward, readout_bias_key, task_loss, ModelConfig, TaskKind, TaskTarget,
};
use crate::metrics::{dice, mae, mauc_present, MetricReport, MetricValues, Region};
use crate::multiview::PlaneId;
use crate::params::ParamStore;
use crate::ssl::{is_encoder_key, pretrain_encoder, pretrain_transformer};
use crate::train::{
    make_folds, mean_std, per_sample, reduce_grads, sample_seed, subsample, train, Direction, EpochRecord,
    FoldAssignment, Objective,
};
use crate::transformer::init_transformer;
use crate::volume::{load_labels, LabelVolume};

const STAGE_ENCODER: u64 = 1;
const STAGE_TRANSFORMER: u64 = 2;
const STAGE_FINETUNE: u64 = 3;

#[derive(Debug, Clone)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Channel count shared by every sample.
pub fn data_channels(samples: &[Sample]) -> Result<usize> {
    let first = samples.first().ok_or_else(|| Error::Empty("dataset has no samples".into()))?;
    let c = first.volume.channels();
    if let Some(s) = samples.iter().find(|s| s.volume.channels() != c) {
        return Err(Error::Shape(format!(
            "sample {} has {} channels, expected {c}",
            s.id,
            s.volume.channels()
        )));
    }
    Ok(c)
}

/// Embedded configuration; the dataset location is left out like in the
/// run fingerprint.
fn config_value(cfg: &RunConfig) -> serde_json::Value {
    let mut c = cfg.clone();
    c.data.dir = Default::default();
    serde_json::to_value(&c).expect("config serialises")
}

fn stage_checkpoint(
    cfg: &RunConfig,
    stage: Stage,
    params: ParamStore,
    epoch: usize,
    best_metric: f64,
) -> Checkpoint {
    Checkpoint {
        params,
        stage,
        backbone_fingerprint: cfg.backbone_fingerprint(),
        run_fingerprint: cfg.fingerprint(),
        epoch,
        best_metric: Some(best_metric).filter(|m| m.is_finite()),
        config: config_value(cfg),
    }
}

/// Backbone parameters of `ck` with the stem adapted to `channels` inputs.
fn adapted_backbone(ck: &Checkpoint, channels: usize, scale: bool) -> Result<ParamStore> {
    match stored_in_channels(&ck.params) {
        Some(c) if c == channels => Ok(ck.params.clone()),
        Some(_) => adapt_input_channels(&ck.params, channels, scale),
        None => Err(Error::Checkpoint("checkpoint holds no encoder parameters".into())),
    }
}

/// Stage 1: triplet pre-training of freshly initialised per-plane encoders.
pub fn run_encoder_stage(samples: &[Sample], cfg: &RunConfig) -> Result<StageResult> {
    cfg.validate()?;
    let mut enc = cfg.encoder.clone();
    enc.in_channels = data_channels(samples)?;
    enc.taps.clear();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, STAGE_ENCODER, 0));
    let mut store = ParamStore::new();
    for plane in PlaneId::ALL {
        init_encoder(&enc, plane, &mut rng, &mut store);
    }
    let out = pretrain_encoder(samples, store, &enc, &cfg.ssl, &cfg.pretrain, cfg.seed, &|_| true)?;
    Ok(StageResult {
        checkpoint: stage_checkpoint(cfg, Stage::EncoderSsl, out.params, out.best_epoch, out.best_metric),
        history: out.history,
    })
}

/// Stage 2: masked encoding prediction on top of a stage-1 encoder.
pub fn run_transformer_stage(
    samples: &[Sample],
    cfg: &RunConfig,
    encoder: &Checkpoint,
    force: bool,
) -> Result<StageResult> {
    cfg.validate()?;
    encoder.check_backbone(&cfg.backbone_fingerprint(), force)?;
    encoder.require_stage(&[Stage::EncoderSsl, Stage::TransformerSsl])?;
    let channels = data_channels(samples)?;
    let mut store = adapted_backbone(encoder, channels, cfg.finetune.adapt_scale)?;
    store.retain(is_encoder_key);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, STAGE_TRANSFORMER, 0));
    init_transformer(&cfg.transformer, &mut rng, &mut store, true);
    let mut enc = cfg.encoder.clone();
    enc.in_channels = channels;
    let out = pretrain_transformer(samples, store, &enc, &cfg.transformer, &cfg.ssl, &cfg.pretrain, cfg.seed)?;
    Ok(StageResult {
        checkpoint: stage_checkpoint(cfg, Stage::TransformerSsl, out.params, out.best_epoch, out.best_metric),
        history: out.history,
    })
}

/// Model prediction for one volume.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Softmax class probabilities.
    Scores(Array1<f64>),
    Value(f64),
    Labels(LabelVolume),
}

pub fn predict(params: &ParamStore, cfg: &ModelConfig, sample: &Sample) -> Result<Prediction> {
    let mut tape = Tape::new();
    let out = model_forward(&mut tape, params, cfg, &sample.volume, None)?;
    let v = view2(tape.value(out)).to_owned();
    Ok(match cfg.task.kind {
        TaskKind::Classification => {
            let row = v.row(0);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e = row.mapv(|x| (x - m).exp());
            let s = e.sum();
            Prediction::Scores(e / s)
        }
        TaskKind::Regression => Prediction::Value(v[[0, 0]]),
        TaskKind::Segmentation => {
            Prediction::Labels(argmax_labels(&v, sample.volume.spatial(), &cfg.task.label_set)?)
        }
    })
}

fn target_of(sample: &Sample, cfg: &ModelConfig) -> Result<TaskTarget> {
    let missing = |what: &str| Error::InvalidArgument(format!("sample {} has no {what}", sample.id));
    Ok(match cfg.task.kind {
        TaskKind::Classification => {
            let c = sample.class.ok_or_else(|| missing("class label"))?;
            if c >= cfg.task.num_classes {
                return Err(Error::UnknownLabel(c as i64));
            }
            TaskTarget::Class(c)
        }
        TaskKind::Regression => TaskTarget::Value(sample.target.ok_or_else(|| missing("scalar target"))?),
        TaskKind::Segmentation => TaskTarget::Labels(sample.labels.clone().ok_or_else(|| missing("label volume"))?),
    })
}

/// Test metrics: `mauc`, `mae`, or `dice_wt`/`dice_tc`/`dice_et`.
pub fn evaluate_samples(params: &ParamStore, cfg: &ModelConfig, samples: &[&Sample]) -> Result<MetricValues> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let preds = per_sample(&idx, |_, i| predict(params, cfg, samples[i]))?;
    let mut out = MetricValues::new();
    match cfg.task.kind {
        TaskKind::Classification => {
            let k = cfg.task.num_classes;
            let mut scores = Array2::zeros((samples.len(), k));
            let mut labels = Vec::with_capacity(samples.len());
            for (r, (p, s)) in preds.iter().zip(samples).enumerate() {
                if let Prediction::Scores(sc) = p {
                    scores.row_mut(r).assign(sc);
                }
                match target_of(s, cfg)? {
                    TaskTarget::Class(c) => labels.push(c),
                    _ => unreachable!("classification target"),
                }
            }
            out.insert("mauc".into(), mauc_present(&scores, &labels)?);
        }
        TaskKind::Regression => {
            let mut p = Vec::new();
            let mut t = Vec::new();
            for (pred, s) in preds.iter().zip(samples) {
                if let Prediction::Value(v) = pred {
                    p.push(*v);
                }
                t.push(s.target.ok_or_else(|| Error::InvalidArgument(format!("sample {} has no target", s.id)))?);
            }
            out.insert("mae".into(), mae(&p, &t)?);
        }
        TaskKind::Segmentation => {
            for region in Region::ALL {
                let mut total = 0.0;
                for (pred, s) in preds.iter().zip(samples) {
                    let truth = s
                        .labels
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument(format!("sample {} has no labels", s.id)))?;
                    if let Prediction::Labels(l) = pred {
                        total += dice(l, truth, region)?;
                    }
                }
                out.insert(format!("dice_{}", region.name()), total / samples.len() as f64);
            }
        }
    }
    Ok(out)
}

/// The early-stopping metric: mAUC, MAE or mean Dice over the regions.
pub fn primary_metric(kind: TaskKind, m: &MetricValues) -> f64 {
    match kind {
        TaskKind::Classification => m["mauc"],
        TaskKind::Regression => m["mae"],
        TaskKind::Segmentation => {
            Region::ALL.iter().map(|r| m[&format!("dice_{}", r.name())]).sum::<f64>() / Region::ALL.len() as f64
        }
    }
}

struct FinetuneObjective<'a> {
    train: Vec<&'a Sample>,
    val: Vec<&'a Sample>,
    cfg: &'a ModelConfig,
    seed: u64,
}

impl Objective for FinetuneObjective<'_> {
    fn len(&self) -> usize {
        self.train.len()
    }

    fn batch(&mut self, params: &ParamStore, batch: &[usize], epoch: usize) -> Result<(f64, Gradients)> {
        let scale = 1.0 / batch.len() as f64;
        let dropout = self.cfg.use_transformer && self.cfg.transformer.dropout > 0.0;
        let parts = per_sample(batch, |_, i| {
            let sample = self.train[i];
            let target = target_of(sample, self.cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed, epoch as u64, i as u64));
            let mut tape = Tape::new();
            let out = model_forward(&mut tape, params, self.cfg, &sample.volume, dropout.then_some(&mut rng))?;
            let loss = task_loss(&mut tape, out, &target, &self.cfg.task)?;
            let loss = tape.scale(loss, scale);
            Ok((tape.scalar(loss), tape.backward(loss)))
        })?;
        Ok(reduce_grads(parts))
    }

    fn validate(&self, params: &ParamStore) -> Result<f64> {
        Ok(primary_metric(self.cfg.task.kind, &evaluate_samples(params, self.cfg, &self.val)?))
    }

    fn direction(&self) -> Direction {
        match self.cfg.task.kind {
            TaskKind::Regression => Direction::Minimize,
            _ => Direction::Maximize,
        }
    }
}

/// Result of fine-tuning on one fold rotation.
#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub val_metric: f64,
    pub test_metrics: MetricValues,
    pub split: FoldAssignment,
    /// Subjects actually trained on after ratio subsampling.
    pub train_subjects: Vec<String>,
    pub test_samples: usize,
}

/// Subject ids in first-appearance order.
pub fn subjects_of(samples: &[Sample]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.subject.clone()))
        .map(|s| s.subject.clone())
        .collect()
}

/// Model configuration of `cfg` sized for `samples`.
pub fn model_config(cfg: &RunConfig, samples: &[Sample]) -> Result<ModelConfig> {
    let mut m = cfg.model(cfg.task.kind);
    m.encoder.in_channels = data_channels(samples)?;
    m.validate()?;
    Ok(m)
}

fn is_backbone_key(name: &str, use_transformer: bool) -> bool {
    is_encoder_key(name) || (use_transformer && (name.starts_with("transformer.") || name.starts_with("segment.")))
}

/// Initial fine-tuning parameters: fresh model with the backbone of
/// `pretrained` copied in when given.
pub fn finetune_init(
    cfg: &RunConfig,
    model: &ModelConfig,
    pretrained: Option<&Checkpoint>,
    force: bool,
) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, STAGE_FINETUNE, cfg.finetune.fold as u64));
    let mut params = init_model(model, &mut rng)?;
    if let Some(ck) = pretrained {
        ck.check_backbone(&cfg.backbone_fingerprint(), force)?;
        ck.require_stage(&[Stage::EncoderSsl, Stage::TransformerSsl, Stage::Finetuned])?;
        let source = adapted_backbone(ck, model.encoder.in_channels, cfg.finetune.adapt_scale)?;
        for (k, v) in source.iter() {
            if !is_backbone_key(k, model.use_transformer) {
                continue;
            }
            let own = params.get(k)?;
            if own.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "{k}: checkpoint shape {:?} vs model {:?}",
                    v.shape(),
                    own.shape()
                )));
            }
        }
        params.overlay(&source, |k| is_backbone_key(k, model.use_transformer));
    }
    Ok(params)
}

/// Fine-tunes on rotation `cfg.finetune.fold` of a `cfg.finetune.folds`-way
/// subject split, keeping `floor(ratio * n)` training subjects.
pub fn finetune(samples: &[Sample], pretrained: Option<&Checkpoint>, cfg: &RunConfig, force: bool) -> Result<FinetuneRun> {
    cfg.validate()?;
    let model = model_config(cfg, samples)?;
    let folds = make_folds(&subjects_of(samples), cfg.finetune.folds, cfg.seed)?;
    let split = folds.assignment(cfg.finetune.fold)?;
    let train_subjects = subsample(&split.train, cfg.finetune.ratio)?;
    let train_set = select_subjects(samples, &train_subjects);
    let val_set = select_subjects(samples, &split.val);
    let test_set = select_subjects(samples, &split.test);
    log::info!(
        "fold {}: {} train / {} val / {} test samples",
        cfg.finetune.fold,
        train_set.len(),
        val_set.len(),
        test_set.len()
    );
    let mut params = finetune_init(cfg, &model, pretrained, force)?;
    if model.task.kind == TaskKind::Regression {
        let targets = train_set
            .iter()
            .map(|s| target_of(s, &model).map(|t| if let TaskTarget::Value(v) = t { v } else { 0.0 }))
            .collect::<Result<Vec<f64>>>()?;
        let (mean, _) = mean_std(&targets);
        params.get_mut(readout_bias_key(&model))?.fill(mean);
    }
    let seed = sample_seed(cfg.seed, STAGE_FINETUNE, cfg.finetune.fold as u64);
    let mut objective = FinetuneObjective {
        train: train_set,
        val: val_set,
        cfg: &model,
        seed,
    };
    let out = train(&mut objective, params, &cfg.train, seed, &|_| true)?;
    let test_metrics = evaluate_samples(&out.params, &model, &test_set)?;
    let mut ck_cfg = cfg.clone();
    ck_cfg.encoder.in_channels = model.encoder.in_channels;
    Ok(FinetuneRun {
        checkpoint: stage_checkpoint(&ck_cfg, Stage::Finetuned, out.params, out.best_epoch, out.best_metric),
        history: out.history,
        val_metric: out.best_metric,
        test_metrics,
        split,
        train_subjects,
        test_samples: test_set.len(),
    })
}

/// Mean and population std per metric over `per_fold`.
pub fn aggregate(task: TaskKind, per_fold: Vec<MetricValues>, samples: usize, fingerprint: String) -> MetricReport {
    let mut metrics = MetricValues::new();
    let mut std = MetricValues::new();
    if let Some(first) = per_fold.first() {
        for name in first.keys() {
            let vals: Vec<f64> = per_fold.iter().filter_map(|m| m.get(name).copied()).collect();
            let (m, s) = mean_std(&vals);
            metrics.insert(name.clone(), m);
            std.insert(name.clone(), s);
        }
    }
    MetricReport {
        task: task.short().into(),
        metrics,
        std,
        per_fold,
        samples,
        fingerprint,
    }
}

/// Report for a single fine-tuning run.
pub fn run_report(cfg: &RunConfig, run: &FinetuneRun) -> MetricReport {
    MetricReport {
        task: cfg.task.kind.short().into(),
        metrics: run.test_metrics.clone(),
        std: MetricValues::new(),
        per_fold: Vec::new(),
        samples: run.test_samples,
        fingerprint: cfg.fingerprint(),
    }
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub report: MetricReport,
    pub runs: Vec<FinetuneRun>,
}

/// Every fold rotation in turn; a failing fold aborts with the report of the
/// completed folds attached.
pub fn run_cv(samples: &[Sample], pretrained: Option<&Checkpoint>, cfg: &RunConfig, force: bool) -> Result<CvResult> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.finetune.folds);
    for fold in 0..cfg.finetune.folds {
        let mut c = cfg.clone();
        c.finetune.fold = fold;
        match finetune(samples, pretrained, &c, force) {
            Ok(run) => runs.push(run),
            Err(e) => {
                let partial = summarise(cfg, &runs);
                return Err(Error::FoldFailed {
                    fold,
                    partial: Box::new(partial),
                    source: Box::new(e),
                });
            }
        }
    }
    Ok(CvResult {
        report: summarise(cfg, &runs),
        runs,
    })
}

fn summarise(cfg: &RunConfig, runs: &[FinetuneRun]) -> MetricReport {
    aggregate(
        cfg.task.kind,
        runs.iter().map(|r| r.test_metrics.clone()).collect(),
        runs.iter().map(|r| r.test_samples).sum(),
        cfg.fingerprint(),
    )
}

/// Per-case Dice of predicted label maps against ground truth matched by
/// file name, averaged over cases.
pub fn evaluate_label_dirs(pred_dir: &Path, truth_dir: &Path, label_set: &[u8], fingerprint: &str) -> Result<MetricReport> {
    let mut names: Vec<String> = std::fs::read_dir(pred_dir)
        .map_err(|e| Error::io(pred_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".raw") || n.ends_with(".nii"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Empty(format!("no label volumes in {}", pred_dir.display())));
    }
    let mut per_case = Vec::with_capacity(names.len());
    for n in &names {
        let pred = load_labels(&pred_dir.join(n), label_set)?;
        let truth = load_labels(&truth_dir.join(n), label_set)?;
        let mut m = MetricValues::new();
        for region in Region::ALL {
            m.insert(format!("dice_{}", region.name()), dice(&pred, &truth, region)?);
        }
        per_case.push(m);
    }
    let n = per_case.len();
    let mut report = aggregate(TaskKind::Segmentation, per_case, n, fingerprint.to_string());
    report.per_fold.clear();
    Ok(report)
}

/// `epoch,lr,train_loss,val_metric` rows.
pub fn loss_curve_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_metric\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_metric));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold_values(vals: &[f64]) -> Vec<MetricValues> {
        vals.iter().map(|&v| MetricValues::from([("mae".to_string(), v)])).collect()
    }

    #[test]
    fn aggregation_matches_hand_computation() {
        let r = aggregate(TaskKind::Regression, fold_values(&[1.0, 2.0, 3.0, 4.0, 5.0]), 10, "f".into());
        assert_eq!(r.metrics["mae"], 3.0);
        assert!((r.std["mae"] - 2f64.sqrt()).abs() < 1e-12);
        let c = aggregate(TaskKind::Regression, fold_values(&[0.7; 5]), 10, "f".into());
        assert_eq!(c.std["mae"], 0.0);
    }

    #[test]
    fn primary_metric_per_task() {
        let m = MetricValues::from([
            ("dice_wt".to_string(), 0.9),
            ("dice_tc".to_string(), 0.6),
            ("dice_et".to_string(), 0.3),
        ]);
        assert!((primary_metric(TaskKind::Segmentation, &m) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn loss_curve_layout() {
        let h = vec![EpochRecord {
            epoch: 0,
            lr: 1e-4,
            train_loss: 2.5,
            val_metric: 0.5,
        }];
        assert_eq!(loss_curve_csv(&h), "epoch,lr,train_loss,val_metric\n0,0.0001,2.5,0.5\n");
    }
}
