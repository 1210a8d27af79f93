//! Slim 2D residual encoder applied independently to each plane's slices.
//!
//! Layout: 3x3 stem (stride 1) -> residual stages of basic blocks (stride 2
//! from the second stage on) -> global average pool -> linear projection to
//! `d_emb`. Each convolution is followed by per-channel standardisation over
//! the plane's whole slice stack and a learned affine map, so statistics come
//! from one volume and never from other samples. Convolutions pad by edge replication
//! so a spatially constant slice stays constant through every layer.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{view2, Tape, Var};
use crate::error::{Error, Result};
use crate::multiview::{PlaneId, PlaneSliceSet};
use crate::params::{he_normal, ones, uniform_fan_in, zeros, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub d_emb: usize,
    /// 1-based stage indices whose outputs are exposed for multi-scale fusion.
    pub taps: Vec<usize>,
    /// Kernel size of the strided projection on downsampling shortcuts.
    pub shortcut_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stem_width: 16,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: vec![2, 2, 2, 2],
            d_emb: 16,
            taps: vec![2, 3, 4],
            shortcut_kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.in_channels == 0 || self.stem_width == 0 || self.d_emb == 0 {
            return bad("channel counts and d_emb must be positive".into());
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return bad("stage widths must be non-empty and positive".into());
        }
        if self.stage_widths.len() != self.blocks_per_stage.len() {
            return bad(format!(
                "{} stage widths but {} block counts",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            ));
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.d_emb > *self.stage_widths.last().unwrap() {
            return bad(format!(
                "d_emb {} exceeds last stage width {}",
                self.d_emb,
                self.stage_widths.last().unwrap()
            ));
        }
        if let Some(t) = self.taps.iter().find(|&&t| t == 0 || t > self.stage_widths.len()) {
            return bad(format!("tap stage {t} out of range"));
        }
        if self.shortcut_kernel % 2 == 0 {
            return bad("shortcut kernel must be odd".into());
        }
        Ok(())
    }

    pub fn last_width(&self) -> usize {
        *self.stage_widths.last().expect("validated")
    }

    /// Output stride of stage `s` (1-based).
    pub fn stage_stride(&self, s: usize) -> usize {
        1 << (s - 1)
    }

    /// Sum of channels over the tapped stages.
    pub fn tap_channels(&self) -> usize {
        self.taps.iter().map(|&t| self.stage_widths[t - 1]).sum()
    }
}

pub fn encoder_prefix(plane: PlaneId) -> String {
    format!("encoder.{plane}")
}

fn block_stride(stage: usize, block: usize) -> usize {
    if stage > 1 && block == 0 {
        2
    } else {
        1
    }
}

fn add_conv_norm(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    conv: &str,
    norm: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    store.insert(
        format!("{conv}.weight"),
        he_normal(rng, &[cout, cin, k, k], cin * k * k),
    );
    store.insert(format!("{norm}.scale"), ones(&[cout]));
    store.insert(format!("{norm}.shift"), zeros(&[cout]));
}

/// Adds one plane's encoder parameters under `encoder.<plane>`.
pub fn init_encoder(cfg: &EncoderConfig, plane: PlaneId, rng: &mut impl Rng, store: &mut ParamStore) {
    let p = encoder_prefix(plane);
    add_conv_norm(
        store,
        rng,
        &format!("{p}.stem.conv"),
        &format!("{p}.stem.norm"),
        cfg.in_channels,
        cfg.stem_width,
        3,
    );
    let mut cin = cfg.stem_width;
    for (si, (&width, &blocks)) in cfg.stage_widths.iter().zip(&cfg.blocks_per_stage).enumerate() {
        let stage = si + 1;
        for b in 0..blocks {
            let bp = format!("{p}.stage{stage}.block{b}");
            add_conv_norm(store, rng, &format!("{bp}.conv1"), &format!("{bp}.norm1"), cin, width, 3);
            add_conv_norm(store, rng, &format!("{bp}.conv2"), &format!("{bp}.norm2"), width, width, 3);
            if cin != width || block_stride(stage, b) != 1 {
                add_conv_norm(
                    store,
                    rng,
                    &format!("{bp}.shortcut.conv"),
                    &format!("{bp}.shortcut.norm"),
                    cin,
                    width,
                    cfg.shortcut_kernel,
                );
            }
            cin = width;
        }
    }
    store.insert(
        format!("{p}.proj.weight"),
        uniform_fan_in(rng, &[cin, cfg.d_emb], cin),
    );
    store.insert(format!("{p}.proj.bias"), zeros(&[cfg.d_emb]));
}

fn conv_norm(
    tape: &mut Tape,
    store: &ParamStore,
    conv: &str,
    norm: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = tape.param(&format!("{conv}.weight"), store.get(&format!("{conv}.weight"))?);
    let y = tape.conv2d(x, w, stride);
    let y = tape.channel_standardize(y);
    let s = tape.param(&format!("{norm}.scale"), store.get(&format!("{norm}.scale"))?);
    let b = tape.param(&format!("{norm}.shift"), store.get(&format!("{norm}.shift"))?);
    Ok(tape.channel_affine(y, s, b))
}

/// Recorded encoder outputs for one batch of slices.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(N, d_emb)`.
    pub embeddings: Var,
    /// `(stage, (N, a', b', C_stage))` for every configured tap.
    pub taps: Vec<(usize, Var)>,
}

/// Runs one plane's encoder over `x (N, a, b, C)`.
pub fn encoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    plane: PlaneId,
    x: Var,
) -> Result<EncoderOutput> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[3] != cfg.in_channels {
        return Err(Error::Shape(format!(
            "{plane} encoder expects (N, a, b, {}) slices, got {:?}",
            cfg.in_channels, shape
        )));
    }
    let p = encoder_prefix(plane);
    let h = conv_norm(tape, store, &format!("{p}.stem.conv"), &format!("{p}.stem.norm"), x, 1)?;
    let mut h = tape.relu(h);
    let mut cin = cfg.stem_width;
    let mut taps = Vec::new();
    for (si, (&width, &blocks)) in cfg.stage_widths.iter().zip(&cfg.blocks_per_stage).enumerate() {
        let stage = si + 1;
        for b in 0..blocks {
            let bp = format!("{p}.stage{stage}.block{b}");
            let stride = block_stride(stage, b);
            let y = conv_norm(tape, store, &format!("{bp}.conv1"), &format!("{bp}.norm1"), h, stride)?;
            let y = tape.relu(y);
            let y = conv_norm(tape, store, &format!("{bp}.conv2"), &format!("{bp}.norm2"), y, 1)?;
            let shortcut = if cin != width || stride != 1 {
                conv_norm(
                    tape,
                    store,
                    &format!("{bp}.shortcut.conv"),
                    &format!("{bp}.shortcut.norm"),
                    h,
                    stride,
                )?
            } else {
                h
            };
            let sum = tape.add(y, shortcut);
            h = tape.relu(sum);
            cin = width;
        }
        if cfg.taps.contains(&stage) {
            taps.push((stage, h));
        }
    }
    let pooled = tape.global_avg_pool(h);
    let w = tape.param(&format!("{p}.proj.weight"), store.get(&format!("{p}.proj.weight"))?);
    let b = tape.param(&format!("{p}.proj.bias"), store.get(&format!("{p}.proj.bias"))?);
    let z = tape.matmul(pooled, w);
    let embeddings = tape.add_bias(z, b);
    Ok(EncoderOutput { embeddings, taps })
}

/// One tapped 2D map of a single slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TapMap {
    pub stage: usize,
    /// Cumulative downsampling factor relative to the slice.
    pub stride: usize,
    /// Channel-last `(a', b', C)`.
    pub map: Array3<f64>,
}

/// Final embedding plus tapped intermediate maps of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub embedding: Array1<f64>,
    pub taps: Vec<TapMap>,
}

/// Inference over a slice set: `(N, d_emb)` embeddings plus per-slice
/// feature pyramids.
pub fn encode_slices(
    set: &PlaneSliceSet,
    store: &ParamStore,
    cfg: &EncoderConfig,
) -> Result<(Array2<f64>, Vec<FeaturePyramid>)> {
    let first = set
        .slices
        .first()
        .ok_or_else(|| Error::Empty("slice set has no slices".into()))?;
    let (c, a, b) = first.dim();
    if c != cfg.in_channels {
        return Err(Error::Shape(format!(
            "slices have {c} channels, encoder expects {}; adapt the input layer first",
            cfg.in_channels
        )));
    }
    let n = set.len();
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[n, a, b, c]));
    for (i, s) in set.slices.iter().enumerate() {
        for ((ci, ai, bi), &v) in s.indexed_iter() {
            x[[i, ai, bi, ci]] = v as f64;
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = encoder_forward(&mut tape, store, cfg, set.plane, xv)?;
    let z = view2(tape.value(out.embeddings)).to_owned();
    let pyramids = (0..n)
        .map(|i| FeaturePyramid {
            embedding: z.row(i).to_owned(),
            taps: out
                .taps
                .iter()
                .map(|&(stage, v)| TapMap {
                    stage,
                    stride: cfg.stage_stride(stage),
                    map: tape
                        .value(v)
                        .index_axis(Axis(0), i)
                        .to_owned()
                        .into_dimensionality()
                        .expect("rank-3 tap"),
                })
                .collect(),
        })
        .collect();
    Ok((z, pyramids))
}

/// Replicates single-channel stem kernels across `new_c` input channels.
/// With `scale`, replicated kernels are divided by `new_c`.
pub fn adapt_input_channels(store: &ParamStore, new_c: usize, scale: bool) -> Result<ParamStore> {
    if new_c == 0 {
        return Err(Error::InvalidArgument("channel count must be >= 1".into()));
    }
    let mut out = store.clone();
    for plane in PlaneId::ALL {
        let name = format!("{}.stem.conv.weight", encoder_prefix(plane));
        let Ok(w) = store.get(&name) else { continue };
        let s = w.shape().to_vec();
        if s[1] == new_c {
            continue;
        }
        if s[1] != 1 {
            return Err(Error::InvalidArgument(format!(
                "{name} already has {} input channels",
                s[1]
            )));
        }
        let factor = if scale { 1.0 / new_c as f64 } else { 1.0 };
        let replicated = ArrayD::from_shape_fn(IxDyn(&[s[0], new_c, s[2], s[3]]), |idx| {
            w[[idx[0], 0, idx[2], idx[3]]] * factor
        });
        out.insert(name, replicated);
    }
    Ok(out)
}

/// Reads the stem's input channel count back from stored parameters.
pub fn stored_in_channels(store: &ParamStore) -> Option<usize> {
    store
        .get(&format!("{}.stem.conv.weight", encoder_prefix(PlaneId::Sagittal)))
        .ok()
        .map(|w| w.shape()[1])
}
