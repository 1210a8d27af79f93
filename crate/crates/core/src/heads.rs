//! Fine-tuning model: per-plane encoders, transformer, 3D feature-volume
//! fusion and task-specific prediction heads with their losses.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{view2, Tape, Var};
use crate::encoder::{encoder_forward, init_encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::multiview::{plane_tensor, stack_axes, FeatureVolume, PlaneId};
use crate::params::{uniform_fan_in, zeros, ParamStore};
use crate::transformer::{encode, init_transformer, tokens, TransformerConfig};
use crate::volume::{LabelVolume, Volume, BRATS_LABELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    SingleScale,
    MultiScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMethod {
    Trilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Encoder stages (1-based) whose maps join a multi-scale fusion.
    pub taps: Vec<usize>,
    pub upsample: UpsampleMethod,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::SingleScale,
            taps: vec![2, 3, 4],
            upsample: UpsampleMethod::Trilinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(alias = "cls")]
    Classification,
    #[serde(alias = "reg")]
    Regression,
    #[serde(alias = "seg")]
    Segmentation,
}

impl TaskKind {
    pub fn short(self) -> &'static str {
        match self {
            TaskKind::Classification => "cls",
            TaskKind::Regression => "reg",
            TaskKind::Segmentation => "seg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cls" | "classification" => Ok(TaskKind::Classification),
            "reg" | "regression" => Ok(TaskKind::Regression),
            "seg" | "segmentation" => Ok(TaskKind::Segmentation),
            other => Err(Error::Config(format!("unknown task '{other}' (expected cls, reg or seg)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_classes: usize,
    /// Segmentation labels, background first.
    pub label_set: Vec<u8>,
    pub head_hidden: usize,
    /// Voxelwise linear readout with no hidden layer.
    pub head_linear: bool,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Classification,
            num_classes: 3,
            label_set: BRATS_LABELS.to_vec(),
            head_hidden: 64,
            head_linear: false,
        }
    }
}

impl TaskSpec {
    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.num_classes,
            TaskKind::Regression => 1,
            TaskKind::Segmentation => self.label_set.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Classification if self.num_classes < 2 => {
                Err(Error::Config(format!("classification needs >= 2 classes, got {}", self.num_classes)))
            }
            TaskKind::Segmentation if self.label_set.first() != Some(&0) => {
                Err(Error::Config("segmentation label set must start with background 0".into()))
            }
            TaskKind::Segmentation if self.label_set.windows(2).any(|w| w[0] >= w[1]) => {
                Err(Error::Config("segmentation label set must be strictly increasing".into()))
            }
            _ if !self.head_linear && self.head_hidden == 0 => Err(Error::Config("head_hidden must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn label_index(&self, label: u8) -> Result<usize> {
        self.label_set
            .iter()
            .position(|&l| l == label)
            .ok_or(Error::UnknownLabel(label as i64))
    }
}

/// Everything needed to build and run the fine-tuning model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
    pub fusion: FusionConfig,
    pub task: TaskSpec,
    pub use_transformer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            transformer: TransformerConfig::default(),
            fusion: FusionConfig::default(),
            task: TaskSpec::default(),
            use_transformer: true,
        }
    }
}

impl ModelConfig {
    /// Default configuration for a task; segmentation uses multi-scale fusion.
    pub fn for_task(kind: TaskKind) -> Self {
        let mut cfg = Self::default();
        cfg.task.kind = kind;
        if kind == TaskKind::Segmentation {
            cfg.fusion.mode = FusionMode::MultiScale;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_for_forward().validate()?;
        self.transformer.validate()?;
        self.task.validate()?;
        if self.transformer.d_emb != self.encoder.d_emb {
            return Err(Error::Config(format!(
                "transformer d_emb {} differs from encoder d_emb {}",
                self.transformer.d_emb, self.encoder.d_emb
            )));
        }
        if self.task.kind == TaskKind::Segmentation && self.fusion.mode != FusionMode::MultiScale {
            return Err(Error::Config("segmentation requires multi_scale fusion".into()));
        }
        if self.fusion.mode == FusionMode::MultiScale {
            let stages = self.encoder.stage_widths.len();
            if self.fusion.taps.is_empty() {
                return Err(Error::Config("multi_scale fusion needs at least one tap".into()));
            }
            if let Some(t) = self.fusion.taps.iter().find(|&&t| t == 0 || t > stages) {
                return Err(Error::Config(format!("tap stage {t} outside 1..={stages}")));
            }
        }
        Ok(())
    }

    /// Encoder configuration with the taps this fusion mode needs.
    pub fn encoder_for_forward(&self) -> EncoderConfig {
        let taps = match self.fusion.mode {
            FusionMode::SingleScale => Vec::new(),
            FusionMode::MultiScale => self.fusion.taps.clone(),
        };
        EncoderConfig {
            taps,
            ..self.encoder.clone()
        }
    }

    /// `3 d_emb` plus, for multi-scale fusion, every tap's channels per plane.
    pub fn fused_channels(&self) -> usize {
        let base = 3 * self.encoder.d_emb;
        match self.fusion.mode {
            FusionMode::SingleScale => base,
            FusionMode::MultiScale => base + 3 * self.encoder_for_forward().tap_channels(),
        }
    }
}

pub fn is_head_key(name: &str) -> bool {
    name.starts_with("head.")
}

/// Adds the prediction head for `cfg`.
pub fn init_head(cfg: &ModelConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let f = cfg.fused_channels();
    let k = cfg.task.outputs();
    if cfg.task.head_linear {
        store.insert("head.fc.weight", uniform_fan_in(rng, &[f, k], f));
        store.insert("head.fc.bias", zeros(&[k]));
    } else {
        let h = cfg.task.head_hidden;
        store.insert("head.fc1.weight", uniform_fan_in(rng, &[f, h], f));
        store.insert("head.fc1.bias", zeros(&[h]));
        store.insert("head.fc2.weight", uniform_fan_in(rng, &[h, k], h));
        store.insert("head.fc2.bias", zeros(&[k]));
    }
}

/// Name of the readout bias (the last layer's bias).
pub fn readout_bias_key(cfg: &ModelConfig) -> &'static str {
    if cfg.task.head_linear {
        "head.fc.bias"
    } else {
        "head.fc2.bias"
    }
}

/// Fresh parameters for the whole model.
pub fn init_model(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for plane in PlaneId::ALL {
        init_encoder(&cfg.encoder, plane, rng, &mut store);
    }
    if cfg.use_transformer {
        init_transformer(&cfg.transformer, rng, &mut store, false);
    }
    init_head(cfg, rng, &mut store);
    Ok(store)
}

fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"), store.get(&format!("{prefix}.weight"))?);
    let b = tape.param(&format!("{prefix}.bias"), store.get(&format!("{prefix}.bias"))?);
    let y = tape.matmul(x, w);
    Ok(tape.add_bias(y, b))
}

/// Voxelwise head over fused voxel rows `(V, F)`, giving `(V, outputs)`.
pub fn head_forward(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, rows: Var) -> Result<Var> {
    let f = tape.value(rows).shape()[1];
    if f != cfg.fused_channels() {
        return Err(Error::Shape(format!(
            "head expects {} fused channels, got {f}",
            cfg.fused_channels()
        )));
    }
    if cfg.task.head_linear {
        linear(tape, store, "head.fc", rows)
    } else {
        let h = linear(tape, store, "head.fc1", rows)?;
        let h = tape.relu(h);
        linear(tape, store, "head.fc2", h)
    }
}

/// Stacks a plane's per-slice tap maps `(N, a', b', C)` into the volume grid
/// and resizes it trilinearly (aligned corners) to `grid`, giving voxel rows
/// `(W*D*H, C)`.
pub fn upsample_tap(tape: &mut Tape, tap: Var, plane: PlaneId, grid: [usize; 3]) -> Var {
    let stacked = tape.permute(tap, &stack_axes(plane));
    let mut x = stacked;
    for (axis, &n) in grid.iter().enumerate() {
        if tape.value(x).shape()[axis] != n {
            x = tape.resize_axis(x, axis, n);
        }
    }
    let c = tape.value(x).shape()[3];
    tape.reshape(x, &[grid.iter().product(), c])
}

/// Array form of [`upsample_tap`] for a stacked channel-last map
/// `(W', D', H', C)`; returns a `(C, W, D, H)` feature volume.
pub fn upsample_map(stacked: &ArrayD<f64>, target: [usize; 3]) -> Result<FeatureVolume> {
    if stacked.ndim() != 4 {
        return Err(Error::Shape(format!("stacked map must be rank 4, got {:?}", stacked.shape())));
    }
    let mut tape = Tape::new();
    let mut x = tape.constant(stacked.clone());
    for (axis, &n) in target.iter().enumerate() {
        x = tape.resize_axis(x, axis, n);
    }
    let c = stacked.shape()[3];
    let rows = tape
        .value(x)
        .clone()
        .into_shape_with_order((target.iter().product(), c))
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FeatureVolume::from_voxel_rows(&rows, target, vec!["upsampled".into()]))
}

/// Fused voxel rows `(V, F)` for a volume: per-plane encodings broadcast
/// over the grid, then (multi-scale) upsampled tap maps, in the order
/// sagittal, coronal, axial, then each plane's taps.
pub fn fused_rows(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    volume: &Volume,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let grid = volume.spatial();
    let enc_cfg = cfg.encoder_for_forward();
    let mut encodings = Vec::with_capacity(3);
    let mut taps = Vec::new();
    for plane in PlaneId::ALL {
        let x = tape.constant(plane_tensor(volume, plane));
        let out = encoder_forward(tape, store, &enc_cfg, plane, x)?;
        let e = if cfg.use_transformer {
            let t = tokens(tape, store, &cfg.transformer, plane, out.embeddings, &[])?;
            encode(tape, store, &cfg.transformer, plane, t, rng.as_deref_mut())?
        } else {
            out.embeddings
        };
        encodings.push(tape.broadcast_plane(e, plane, grid));
        for (_, tap) in out.taps {
            taps.push(upsample_tap(tape, tap, plane, grid));
        }
    }
    encodings.extend(taps);
    Ok(tape.concat_cols(&encodings))
}

/// Model output: `(1, K)` class logits, `(1, 1)` regression value or
/// `(V, L)` voxel logits.
pub fn model_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    volume: &Volume,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if volume.channels() != cfg.encoder.in_channels {
        return Err(Error::Shape(format!(
            "volume has {} channels, model expects {}",
            volume.channels(),
            cfg.encoder.in_channels
        )));
    }
    let rows = fused_rows(tape, store, cfg, volume, rng)?;
    let out = head_forward(tape, store, cfg, rows)?;
    Ok(match cfg.task.kind {
        TaskKind::Segmentation => out,
        _ => {
            let k = cfg.task.outputs();
            let pooled = tape.mean_rows(out);
            tape.reshape(pooled, &[1, k])
        }
    })
}

fn head_on_volume(store: &ParamStore, cfg: &ModelConfig, fused: &FeatureVolume) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let rows = tape.constant(fused.to_voxel_rows().into_dyn());
    let out = head_forward(&mut tape, store, cfg, rows)?;
    Ok(view2(tape.value(out)).to_owned())
}

/// Class scores: voxelwise head then global average pooling.
pub fn predict_classification(store: &ParamStore, cfg: &ModelConfig, fused: &FeatureVolume) -> Result<Array1<f64>> {
    Ok(head_on_volume(store, cfg, fused)?.mean_axis(Axis(0)).expect("non-empty volume"))
}

pub fn predict_regression(store: &ParamStore, cfg: &ModelConfig, fused: &FeatureVolume) -> Result<f64> {
    Ok(predict_classification(store, cfg, fused)?[0])
}

/// Voxel logits `(L, W, D, H)`.
pub fn predict_segmentation(store: &ParamStore, cfg: &ModelConfig, fused: &FeatureVolume) -> Result<Array4<f64>> {
    let rows = head_on_volume(store, cfg, fused)?;
    Ok(FeatureVolume::from_voxel_rows(&rows, fused.spatial(), Vec::new()).data)
}

/// Per-voxel argmax over `(V, L)` logits mapped to labels; ties go to the
/// lowest label.
pub fn argmax_labels(logits: &Array2<f64>, grid: [usize; 3], label_set: &[u8]) -> Result<LabelVolume> {
    let labels: Vec<u8> = logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            label_set[best]
        })
        .collect();
    let arr = ndarray::Array3::from_shape_vec((grid[0], grid[1], grid[2]), labels)
        .map_err(|e| Error::Shape(e.to_string()))?;
    LabelVolume::new(arr, label_set.to_vec())
}

/// Supervision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskTarget {
    Class(usize),
    Value(f64),
    Labels(LabelVolume),
}

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Task loss on the tape: cross-entropy, absolute error, or voxel
/// cross-entropy plus soft Dice over the non-background labels.
pub fn task_loss(tape: &mut Tape, output: Var, target: &TaskTarget, spec: &TaskSpec) -> Result<Var> {
    match (spec.kind, target) {
        (TaskKind::Classification, TaskTarget::Class(c)) => {
            if *c >= spec.num_classes {
                return Err(Error::UnknownLabel(*c as i64));
            }
            Ok(tape.softmax_cross_entropy(output, &[*c]))
        }
        (TaskKind::Regression, TaskTarget::Value(y)) => {
            let t = tape.constant(ArrayD::from_elem(tape.value(output).raw_dim(), *y));
            let d = tape.sub(output, t);
            let a = tape.abs(d);
            Ok(tape.mean(a))
        }
        (TaskKind::Segmentation, TaskTarget::Labels(lv)) => {
            let l = spec.label_set.len();
            let idx = lv
                .labels
                .iter()
                .map(|&v| spec.label_index(v))
                .collect::<Result<Vec<usize>>>()?;
            if tape.value(output).shape() != [idx.len(), l] {
                return Err(Error::Shape(format!(
                    "segmentation logits {:?} vs {} voxels x {l} labels",
                    tape.value(output).shape(),
                    idx.len()
                )));
            }
            let ce = tape.softmax_cross_entropy(output, &idx);
            let mut onehot = Array2::<f64>::zeros((idx.len(), l));
            for (r, &c) in idx.iter().enumerate() {
                onehot[[r, c]] = 1.0;
            }
            let tsum = onehot.sum_axis(Axis(0));
            let probs = tape.softmax_rows(output);
            let t = tape.constant(onehot.into_dyn());
            let pt = tape.mul(probs, t);
            let inter = tape.sum_rows(pt);
            let psum = tape.sum_rows(probs);
            let num = tape.scale(inter, 2.0);
            let num = tape.add_scalar(num, DICE_SMOOTH);
            let tc = tape.constant((tsum + DICE_SMOOTH).into_dyn());
            let den = tape.add(psum, tc);
            let dice = tape.div(num, den);
            let dice = tape.reshape(dice, &[1, l]);
            let fg = tape.slice_cols(dice, 1, l);
            let mean_dice = tape.mean(fg);
            let dice_loss = tape.scale(mean_dice, -1.0);
            let dice_loss = tape.add_scalar(dice_loss, 1.0);
            Ok(tape.add(ce, dice_loss))
        }
        (kind, _) => Err(Error::InvalidArgument(format!("target does not match task {kind:?}"))),
    }
}
