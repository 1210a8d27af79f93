//! Self-supervised pre-training: exemplar triplet training of the slice
//! encoders with Bezier intensity augmentation, then masked encoding-vector
//! prediction for the transformer with the encoders frozen.


use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::dataset::Sample;
use crate::encoder::{encode_slices, encoder_forward, EncoderConfig};
use crate::error::{Error, Result};
use crate::multiview::{decompose, plane_tensor, PlaneId};
use crate::params::ParamStore;
use crate::train::{per_sample, reduce_grads, sample_seed, train, Direction, Objective, TrainConfig, TrainOutcome};
use crate::transformer::{encode, positional_encoding, segment_key, tokens, TransformerConfig};
use crate::volume::Volume;

/// Cubic Bezier with end points (0,0), (1,1) and inner control points
/// `p1 = (a, b)`, `p2 = (c, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BezierCurveParams {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
}

const BISECTION_STEPS: usize = 32;

fn cubic(t: f64, c1: f64, c2: f64) -> f64 {
    let s = 1.0 - t;
    3.0 * s * s * t * c1 + 3.0 * s * t * t * c2 + t * t * t
}

impl BezierCurveParams {
    pub fn new(p1: [f64; 2], p2: [f64; 2]) -> Result<Self> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(p1.iter().chain(&p2).all(|&v| unit(v)) && p1[0] <= p2[0] && p1[1] <= p2[1]) {
            return Err(Error::InvalidArgument(format!(
                "control points {p1:?}, {p2:?} must satisfy 0 <= a <= c <= 1 and 0 <= b <= d <= 1"
            )));
        }
        Ok(Self { p1, p2 })
    }

    pub fn identity() -> Self {
        Self {
            p1: [1.0 / 3.0, 1.0 / 3.0],
            p2: [2.0 / 3.0, 2.0 / 3.0],
        }
    }

    /// Uniform control points, sorted per coordinate.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let (mut a, mut c) = (rng.random::<f64>(), rng.random::<f64>());
        let (mut b, mut d) = (rng.random::<f64>(), rng.random::<f64>());
        if a > c {
            std::mem::swap(&mut a, &mut c);
        }
        if b > d {
            std::mem::swap(&mut b, &mut d);
        }
        Self {
            p1: [a, b],
            p2: [c, d],
        }
    }

    /// Solves `x(t) = x` by bisection, then returns `y(t)`.
    pub fn map(&self, x: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if cubic(mid, self.p1[0], self.p2[0]) < x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        cubic(t, self.p1[1], self.p2[1]).clamp(0.0, 1.0)
    }
}

/// Applies the intensity curve voxelwise. Intensities must lie in `[0, 1]`.
pub fn bezier_transform(volume: &Volume, params: &BezierCurveParams) -> Result<Volume> {
    if let Some(bad) = volume.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "intensity {bad} outside [0, 1]; normalise first"
        )));
    }
    Volume::new(volume.data.mapv(|v| params.map(v as f64) as f32))
}

/// `(1/N) sum max(0, D(a,p) - D(a,n) + margin)` over rows, `D` Euclidean.
pub fn triplet_loss(anchor: &Array2<f64>, positive: &Array2<f64>, negative: &Array2<f64>, margin: f64) -> Result<f64> {
    if anchor.nrows() == 0 {
        return Err(Error::Empty("triplet batch is empty".into()));
    }
    if anchor.dim() != positive.dim() || anchor.dim() != negative.dim() {
        return Err(Error::Shape(format!(
            "triplet shapes differ: {:?}, {:?}, {:?}",
            anchor.dim(),
            positive.dim(),
            negative.dim()
        )));
    }
    if margin < 0.0 {
        return Err(Error::InvalidArgument(format!("margin {margin} is negative")));
    }
    let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let total: f64 = (0..anchor.nrows())
        .map(|i| {
            let dp = dist(anchor.row(i), positive.row(i));
            let dn = dist(anchor.row(i), negative.row(i));
            (dp - dn + margin).max(0.0)
        })
        .sum();
    Ok(total / anchor.nrows() as f64)
}

/// One hinge term `max(0, D(a,p) - D(a,n) + margin)` on the tape.
pub fn triplet_term(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, margin: f64) -> Var {
    let dp = tape.l2_distance(anchor, positive);
    let dn = tape.l2_distance(anchor, negative);
    let diff = tape.sub(dp, dn);
    let shifted = tape.add_scalar(diff, margin);
    tape.relu(shifted)
}

/// Masked slice indices per plane (sagittal, coronal, axial).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub positions: [Vec<usize>; 3],
    pub ratio: f64,
    pub seed: u64,
}

/// `floor(ratio * n)`.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

impl MaskPlan {
    /// Draws `floor(ratio * n)` distinct sorted positions for each plane's
    /// slice count.
    pub fn new(counts: [usize; 3], ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside (0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions: [Vec<usize>; 3] = Default::default();
        for (slot, &n) in positions.iter_mut().zip(&counts) {
            let k = mask_count(n, ratio);
            if k == 0 {
                return Err(Error::InvalidArgument(format!(
                    "mask ratio {ratio} masks no slice of a {n}-slice sequence"
                )));
            }
            let mut idx = sample_indices(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            *slot = idx;
        }
        Ok(Self { positions, ratio, seed })
    }

    pub fn for_plane(&self, plane: PlaneId) -> &[usize] {
        &self.positions[plane.code()]
    }
}

/// Mean squared error over the flagged rows only.
pub fn masked_prediction_loss(pred: &Array2<f64>, target: &Array2<f64>, masked: &[bool]) -> Result<f64> {
    if pred.dim() != target.dim() || masked.len() != pred.nrows() {
        return Err(Error::Shape(format!(
            "prediction {:?}, target {:?}, {} mask flags",
            pred.dim(),
            target.dim(),
            masked.len()
        )));
    }
    let rows: Vec<usize> = (0..masked.len()).filter(|&i| masked[i]).collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no masked positions".into()));
    }
    let mut total = 0.0;
    for &r in &rows {
        total += pred
            .row(r)
            .iter()
            .zip(target.row(r).iter())
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>();
    }
    Ok(total / (rows.len() * pred.ncols()) as f64)
}

/// Masked MSE on the tape; `target` is treated as a constant.
pub fn masked_mse(tape: &mut Tape, pred: Var, target: Var, positions: &[usize]) -> Var {
    let p = tape.gather_rows(pred, positions);
    let t = tape.gather_rows(target, positions);
    let diff = tape.sub(p, t);
    let sq = tape.mul(diff, diff);
    tape.mean(sq)
}

/// What the masked rows are trained to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    /// Embedding plus positional and segment encodings.
    Encoding,
    /// Raw encoder embedding.
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub margin: f64,
    pub mask_ratio: f64,
    pub mask_target: MaskTarget,
    pub train_segments: bool,
    /// Samples in the fixed probe set used as the validation metric.
    pub probe_samples: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            mask_ratio: 0.1,
            mask_target: MaskTarget::Encoding,
            train_segments: true,
            probe_samples: 16,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin {} must be >= 0", self.margin)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1]", self.mask_ratio)));
        }
        if self.probe_samples < 2 {
            return Err(Error::Config("probe_samples must be >= 2".into()));
        }
        Ok(())
    }
}

/// Slice-averaged embedding of each plane, recorded on `tape`.
fn plane_means(tape: &mut Tape, store: &ParamStore, cfg: &EncoderConfig, volume: &Volume) -> Result<[Var; 3]> {
    let mut out = Vec::with_capacity(3);
    for plane in PlaneId::ALL {
        let x = tape.constant(plane_tensor(volume, plane));
        let enc = encoder_forward(tape, store, cfg, plane, x)?;
        out.push(tape.mean_rows(enc.embeddings));
    }
    Ok([out[0], out[1], out[2]])
}

fn means_value(tape: &Tape, vars: &[Var; 3]) -> [Array1<f64>; 3] {
    vars.map(|v| tape.value(v).clone().into_dimensionality().expect("rank-1 mean"))
}

/// Index of the first entry after `from` (cyclically) whose subject differs.
fn other_subject(subjects: &[&str], from: usize, subject: &str) -> Option<usize> {
    let n = subjects.len();
    (1..=n).map(|k| (from + k) % n).find(|&j| subjects[j] != subject)
}

/// Seed offset separating negative draws from augmentation draws.
const NEGATIVE_STREAM: u64 = 0x6e65_6761_7469_7665;

struct EncoderObjective<'a> {
    samples: &'a [Sample],
    cfg: &'a EncoderConfig,
    margin: f64,
    seed: u64,
    probe: Vec<(usize, Volume)>,
}

impl<'a> EncoderObjective<'a> {
    fn new(samples: &'a [Sample], cfg: &'a EncoderConfig, ssl: &SslConfig, seed: u64) -> Result<Self> {
        let m = ssl.probe_samples.min(samples.len());
        let probe = (0..m)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, u64::MAX, i as u64));
                let curve = BezierCurveParams::sample(&mut rng);
                Ok((i, bezier_transform(&samples[i].volume, &curve)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            cfg,
            margin: ssl.margin,
            seed,
            probe,
        })
    }
}

impl Objective for EncoderObjective<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn batch(&mut self, params: &ParamStore, batch: &[usize], epoch: usize) -> Result<(f64, Gradients)> {
        let seed = self.seed;
        let (samples, cfg) = (self.samples, self.cfg);
        // Members are the batch followed by the negatives, which are drawn
        // from samples of other subjects outside the batch where possible.
        let mut members: Vec<usize> = batch.to_vec();
        let mut negatives = Vec::with_capacity(batch.len());
        for &i in batch {
            let subject = samples[i].subject.as_str();
            let outside: Vec<usize> = (0..samples.len())
                .filter(|j| !batch.contains(j) && samples[*j].subject != subject)
                .collect();
            let j = if outside.is_empty() {
                let inside: Vec<usize> = batch.iter().copied().filter(|&j| samples[j].subject != subject).collect();
                if inside.is_empty() {
                    return Err(Error::InvalidArgument(
                        "triplet loss needs samples of at least two subjects".into(),
                    ));
                }
                inside
            } else {
                outside
            };
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed ^ NEGATIVE_STREAM, epoch as u64, i as u64));
            let pick = j[rng.random_range(0..j.len())];
            let slot = match members.iter().position(|&m| m == pick) {
                Some(e) => e,
                None => {
                    members.push(pick);
                    members.len() - 1
                }
            };
            negatives.push(slot);
        }
        let n_batch = batch.len();
        // Forward anchors and positives on one tape per member.
        let forwards = per_sample(&members, |pos, i| {
            let mut tape = Tape::new();
            let a = plane_means(&mut tape, params, cfg, &samples[i].volume)?;
            let p = if pos < n_batch {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch as u64, i as u64));
                let curve = BezierCurveParams::sample(&mut rng);
                let positive = bezier_transform(&samples[i].volume, &curve)?;
                Some(plane_means(&mut tape, params, cfg, &positive)?)
            } else {
                None
            };
            Ok((tape, a, p))
        })?;
        let anchors: Vec<[Array1<f64>; 3]> = forwards.iter().map(|(t, a, _)| means_value(t, a)).collect();
        let scale = 1.0 / (3.0 * batch.len() as f64);
        let margin = self.margin;
        // Gradient of each term with respect to its negative, routed back to
        // the tape that produced the negative's embedding.
        let mut pulls: Vec<Vec<(usize, Array1<f64>)>> = vec![Vec::new(); members.len()];
        for (pos, &j) in negatives.iter().enumerate() {
            let positive = means_value(&forwards[pos].0, forwards[pos].2.as_ref().expect("batch member"));
            for k in 0..3 {
                let (a, p, n) = (&anchors[pos][k], &positive[k], &anchors[j][k]);
                let dp = (a - p).mapv(|v| v * v).sum().sqrt();
                let dn = (a - n).mapv(|v| v * v).sum().sqrt();
                if dp - dn + margin > 0.0 && dn > 0.0 {
                    pulls[j].push((k, (a - n) * (scale / dn)));
                }
            }
        }
        let mut negatives = negatives.into_iter().map(Some).collect::<Vec<_>>();
        negatives.resize(members.len(), None);
        let work: Vec<_> = forwards.into_iter().zip(negatives).zip(pulls).collect();
        let parts: Vec<(f64, Gradients)> = {
            use rayon::prelude::*;
            work.into_par_iter()
                .map(|(((mut tape, a, p), j), pull)| {
                    let mut objective = tape.constant(ArrayD::zeros(IxDyn(&[])));
                    let mut value = 0.0;
                    if let (Some(p), Some(j)) = (p, j) {
                        let mut total = None;
                        for k in 0..3 {
                            let n = tape.constant(anchors[j][k].clone().into_dyn());
                            let term = triplet_term(&mut tape, a[k], p[k], n, margin);
                            total = Some(match total {
                                None => term,
                                Some(t) => tape.add(t, term),
                            });
                        }
                        objective = tape.scale(total.expect("three planes"), scale);
                        value = tape.scalar(objective);
                    }
                    for (k, c) in pull {
                        let weighted = tape.mul_const(a[k], c.into_dyn());
                        let dot = tape.sum(weighted);
                        objective = tape.add(objective, dot);
                    }
                    (value, tape.backward(objective))
                })
                .collect()
        };
        Ok(reduce_grads(parts))
    }

    /// Triplet loss on fixed probe samples with fixed augmentations and
    /// in-probe negatives.
    fn validate(&self, params: &ParamStore) -> Result<f64> {
        let idx: Vec<usize> = (0..self.probe.len()).collect();
        let embedded = per_sample(&idx, |_, k| {
            let (i, positive) = &self.probe[k];
            let mut tape = Tape::new();
            let a = plane_means(&mut tape, params, self.cfg, &self.samples[*i].volume)?;
            let p = plane_means(&mut tape, params, self.cfg, positive)?;
            Ok((means_value(&tape, &a), means_value(&tape, &p)))
        })?;
        let subjects: Vec<&str> = self.probe.iter().map(|(i, _)| self.samples[*i].subject.as_str()).collect();
        let d = self.cfg.d_emb;
        let mut total = 0.0;
        for k in 0..3 {
            let mut a = Array2::zeros((embedded.len(), d));
            let mut p = Array2::zeros((embedded.len(), d));
            let mut n = Array2::zeros((embedded.len(), d));
            for (r, (anchor, positive)) in embedded.iter().enumerate() {
                let j = other_subject(&subjects, r, subjects[r])
                    .ok_or_else(|| Error::InvalidArgument("probe set holds a single subject".into()))?;
                a.row_mut(r).assign(&anchor[k]);
                p.row_mut(r).assign(&positive[k]);
                n.row_mut(r).assign(&embedded[j].0[k]);
            }
            total += triplet_loss(&a, &p, &n, self.margin)?;
        }
        Ok(total / 3.0)
    }

    fn direction(&self) -> Direction {
        Direction::Minimize
    }
}

pub fn is_encoder_key(name: &str) -> bool {
    name.starts_with("encoder.")
}

/// Stage 1: trains the encoder parameters in `params` with the triplet
/// objective. Validation metric is the probe-set triplet loss.
pub fn pretrain_encoder(
    samples: &[Sample],
    params: ParamStore,
    cfg: &EncoderConfig,
    ssl: &SslConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<TrainOutcome> {
    ssl.validate()?;
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("triplet pre-training needs at least two samples".into()));
    }
    let mut objective = EncoderObjective::new(samples, cfg, ssl, seed)?;
    train(&mut objective, params, train_cfg, seed, &|k| is_encoder_key(k) && trainable(k))
}

struct TransformerObjective<'a> {
    /// Frozen embeddings per sample and plane.
    embeddings: Vec<[Array2<f64>; 3]>,
    cfg: &'a TransformerConfig,
    ssl: &'a SslConfig,
    seed: u64,
    probe: usize,
}

impl TransformerObjective<'_> {
    fn sample_loss(
        &self,
        params: &ParamStore,
        i: usize,
        plan: &MaskPlan,
        mut rng: Option<&mut ChaCha8Rng>,
        scale: f64,
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let mut total = None;
        for plane in PlaneId::ALL {
            let z = &self.embeddings[i][plane.code()];
            let target = match self.ssl.mask_target {
                MaskTarget::Embedding => z.clone(),
                MaskTarget::Encoding => {
                    let mut t = z.clone();
                    if self.cfg.positional_encoding {
                        t += &positional_encoding(z.nrows(), z.ncols());
                    }
                    let seg = params.get(&segment_key(plane))?;
                    t += &seg.view().into_dimensionality::<ndarray::Ix1>().expect("rank-1 segment");
                    t
                }
            };
            let positions = plan.for_plane(plane);
            let zv = tape.constant(z.clone().into_dyn());
            let tok = tokens(&mut tape, params, self.cfg, plane, zv, positions)?;
            let out = encode(&mut tape, params, self.cfg, plane, tok, rng.as_deref_mut())?;
            let tv = tape.constant(target.into_dyn());
            let l = masked_mse(&mut tape, out, tv, positions);
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l),
            });
        }
        let loss = tape.scale(total.expect("three planes"), scale);
        Ok((tape.scalar(loss), tape.backward(loss)))
    }

    fn counts(&self, i: usize) -> [usize; 3] {
        [0, 1, 2].map(|k| self.embeddings[i][k].nrows())
    }
}

impl Objective for TransformerObjective<'_> {
    fn len(&self) -> usize {
        self.embeddings.len()
    }

    fn batch(&mut self, params: &ParamStore, batch: &[usize], epoch: usize) -> Result<(f64, Gradients)> {
        let scale = 1.0 / (3.0 * batch.len() as f64);
        let this = &*self;
        let parts = per_sample(batch, |_, i| {
            let s = sample_seed(this.seed, epoch as u64, i as u64);
            let plan = MaskPlan::new(this.counts(i), this.ssl.mask_ratio, s)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed);
            this.sample_loss(params, i, &plan, Some(&mut rng), scale)
        })?;
        Ok(reduce_grads(parts))
    }

    fn validate(&self, params: &ParamStore) -> Result<f64> {
        let idx: Vec<usize> = (0..self.probe).collect();
        let scale = 1.0 / (3.0 * idx.len() as f64);
        let parts = per_sample(&idx, |_, i| {
            let plan = MaskPlan::new(self.counts(i), self.ssl.mask_ratio, sample_seed(self.seed, u64::MAX, i as u64))?;
            self.sample_loss(params, i, &plan, None, scale)
        })?;
        Ok(parts.iter().map(|(l, _)| l).sum())
    }

    fn direction(&self) -> Direction {
        Direction::Minimize
    }
}

/// Frozen embeddings of every plane of every sample.
pub fn embed_samples(samples: &[Sample], params: &ParamStore, cfg: &EncoderConfig) -> Result<Vec<[Array2<f64>; 3]>> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let no_taps = EncoderConfig {
        taps: Vec::new(),
        ..cfg.clone()
    };
    per_sample(&idx, |_, i| {
        let sets = decompose(&samples[i].volume);
        let mut out: [Array2<f64>; 3] = Default::default();
        for set in &sets {
            out[set.plane.code()] = encode_slices(set, params, &no_taps)?.0;
        }
        Ok(out)
    })
}

/// Stage 2: trains transformer, mask token and (optionally) segment vectors
/// on masked prediction. Encoder parameters in `params` are frozen and
/// verified unchanged afterwards.
pub fn pretrain_transformer(
    samples: &[Sample],
    params: ParamStore,
    enc_cfg: &EncoderConfig,
    cfg: &TransformerConfig,
    ssl: &SslConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    ssl.validate()?;
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no samples for masked prediction".into()));
    }
    let before = params.digest(is_encoder_key);
    let embeddings = embed_samples(samples, &params, enc_cfg)?;
    for e in &embeddings {
        for z in e {
            if mask_count(z.nrows(), ssl.mask_ratio) == 0 {
                return Err(Error::InvalidArgument(format!(
                    "mask ratio {} masks no slice of a {}-slice sequence",
                    ssl.mask_ratio,
                    z.nrows()
                )));
            }
        }
    }
    let mut objective = TransformerObjective {
        probe: ssl.probe_samples.min(embeddings.len()),
        embeddings,
        cfg,
        ssl,
        seed,
    };
    let train_segments = ssl.train_segments;
    let outcome = train(&mut objective, params, train_cfg, seed, &|k: &str| {
        k.starts_with("transformer.") || k == crate::transformer::MASK_TOKEN || (train_segments && k.starts_with("segment."))
    })?;
    let after = outcome.params.digest(is_encoder_key);
    if before != after {
        return Err(Error::EncoderDrift);
    }
    Ok(outcome)
}
