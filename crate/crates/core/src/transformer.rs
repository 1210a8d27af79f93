//! Transformer over per-plane slice encodings.
//!
//! Tokens are slice embeddings plus a sinusoidal positional encoding and a
//! learned per-plane segment vector. Each layer is a residual self-attention
//! step followed by a residual two-layer point-wise feed-forward step with a
//! ReLU in between. No layer normalisation is applied.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::multiview::PlaneId;
use crate::params::{normal, uniform_fan_in, zeros, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Learned query/key/value/output projections split over `heads`.
    MultiHead,
    /// Single head attending with the tokens themselves as queries, keys and
    /// values, scaled by `1/sqrt(d_emb)`; the feed-forward step has no biases.
    ProjectionFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_emb: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    /// One set of weights for all planes (planes told apart by segment
    /// vectors) or a separate set per plane.
    pub shared_across_planes: bool,
    pub mode: AttentionMode,
    pub dropout: f64,
    pub positional_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_emb: 16,
            d_ff: 64,
            heads: 4,
            layers: 1,
            shared_across_planes: true,
            mode: AttentionMode::MultiHead,
            dropout: 0.0,
            positional_encoding: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.d_ff == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if self.d_emb % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_emb {} is not divisible by {} heads",
                self.d_emb, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn layer_prefix(&self, layer: usize, plane: PlaneId) -> String {
        if self.shared_across_planes {
            format!("transformer.{layer}")
        } else {
            format!("transformer.{layer}.{plane}")
        }
    }
}

pub fn segment_key(plane: PlaneId) -> String {
    format!("segment.{plane}")
}

pub const MASK_TOKEN: &str = "mask_token";

/// `PE[n, 2i] = sin(n / 10000^(2i/d))`, `PE[n, 2i+1] = cos(n / 10000^(2i/d))`.
pub fn positional_encoding(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Adds transformer, segment and mask-token parameters.
pub fn init_transformer(cfg: &TransformerConfig, rng: &mut impl Rng, store: &mut ParamStore, with_mask_token: bool) {
    let (d, f) = (cfg.d_emb, cfg.d_ff);
    let planes: Vec<PlaneId> = if cfg.shared_across_planes {
        vec![PlaneId::Sagittal]
    } else {
        PlaneId::ALL.to_vec()
    };
    for layer in 0..cfg.layers {
        for &plane in &planes {
            let p = cfg.layer_prefix(layer, plane);
            if cfg.mode == AttentionMode::MultiHead {
                for proj in ["q", "k", "v", "o"] {
                    store.insert(format!("{p}.attn.{proj}.weight"), uniform_fan_in(rng, &[d, d], d));
                    store.insert(format!("{p}.attn.{proj}.bias"), zeros(&[d]));
                }
            }
            store.insert(format!("{p}.ffn.fc1.weight"), uniform_fan_in(rng, &[d, f], d));
            store.insert(format!("{p}.ffn.fc2.weight"), uniform_fan_in(rng, &[f, d], f));
            if cfg.mode == AttentionMode::MultiHead {
                store.insert(format!("{p}.ffn.fc1.bias"), zeros(&[f]));
                store.insert(format!("{p}.ffn.fc2.bias"), zeros(&[d]));
            }
        }
    }
    for plane in PlaneId::ALL {
        store.insert(segment_key(plane), normal(rng, &[d], 0.02));
    }
    if with_mask_token {
        store.insert(MASK_TOKEN, normal(rng, &[d], 0.02));
    }
}

/// A plane's token matrix with per-position mask flags.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingSequence {
    pub values: Array2<f64>,
    pub plane: PlaneId,
    pub masked: Vec<bool>,
}

impl EncodingSequence {
    pub fn new(values: Array2<f64>, plane: PlaneId) -> Self {
        let n = values.nrows();
        Self {
            values,
            plane,
            masked: vec![false; n],
        }
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

fn check_positions(positions: &[usize], n: usize) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &p in positions {
        if p >= n {
            return Err(Error::InvalidArgument(format!("mask position {p} out of range for {n} slices")));
        }
        if !seen.insert(p) {
            return Err(Error::InvalidArgument(format!("duplicate mask position {p}")));
        }
    }
    Ok(())
}

/// Replaces the content of the listed positions with `mask_token` and flags
/// them. Unmasked rows are untouched.
pub fn apply_mask(seq: &EncodingSequence, positions: &[usize], mask_token: &ArrayD<f64>) -> Result<EncodingSequence> {
    check_positions(positions, seq.values.nrows())?;
    let mut out = seq.clone();
    for &p in positions {
        out.values
            .row_mut(p)
            .assign(&mask_token.view().into_dimensionality::<ndarray::Ix1>().map_err(|e| Error::Shape(e.to_string()))?);
        out.masked[p] = true;
    }
    Ok(out)
}

/// Builds transformer tokens from raw embeddings `z (N, d)`: masked rows are
/// replaced by the mask token, then positional and segment encodings are
/// added to every row.
pub fn tokens(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &TransformerConfig,
    plane: PlaneId,
    z: Var,
    mask_positions: &[usize],
) -> Result<Var> {
    let n = tape.value(z).shape()[0];
    let d = tape.value(z).shape()[1];
    if d != cfg.d_emb {
        return Err(Error::Shape(format!("embedding width {d} != d_emb {}", cfg.d_emb)));
    }
    let mut e = z;
    if !mask_positions.is_empty() {
        check_positions(mask_positions, n)?;
        let token = tape.param(MASK_TOKEN, store.get(MASK_TOKEN)?);
        e = tape.mask_rows(e, token, mask_positions);
    }
    if cfg.positional_encoding {
        let pe = tape.constant(positional_encoding(n, d).into_dyn());
        e = tape.add(e, pe);
    }
    let seg = tape.param(&segment_key(plane), store.get(&segment_key(plane))?);
    Ok(tape.add_bias(e, seg))
}

fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, bias: bool) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"), store.get(&format!("{prefix}.weight"))?);
    let y = tape.matmul(x, w);
    if bias {
        let b = tape.param(&format!("{prefix}.bias"), store.get(&format!("{prefix}.bias"))?);
        Ok(tape.add_bias(y, b))
    } else {
        Ok(y)
    }
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let shape = tape.value(x).shape().to_vec();
    let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul_const(x, mask)
}

/// Self-attention output (before the residual add) and the attention maps.
fn self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &TransformerConfig,
    prefix: &str,
    e: Var,
) -> Result<(Var, Vec<Var>)> {
    match cfg.mode {
        AttentionMode::ProjectionFree => {
            let et = tape.transpose(e);
            let scores = tape.matmul(e, et);
            let scores = tape.scale(scores, 1.0 / (cfg.d_emb as f64).sqrt());
            let attn = tape.softmax_rows(scores);
            Ok((tape.matmul(attn, e), vec![attn]))
        }
        AttentionMode::MultiHead => {
            let q = linear(tape, store, &format!("{prefix}.attn.q"), e, true)?;
            let k = linear(tape, store, &format!("{prefix}.attn.k"), e, true)?;
            let v = linear(tape, store, &format!("{prefix}.attn.v"), e, true)?;
            let dh = cfg.d_emb / cfg.heads;
            let mut outs = Vec::with_capacity(cfg.heads);
            let mut maps = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, lo, hi);
                let kh = tape.slice_cols(k, lo, hi);
                let vh = tape.slice_cols(v, lo, hi);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let attn = tape.softmax_rows(scores);
                outs.push(tape.matmul(attn, vh));
                maps.push(attn);
            }
            let cat = tape.concat_cols(&outs);
            Ok((linear(tape, store, &format!("{prefix}.attn.o"), cat, true)?, maps))
        }
    }
}

/// One layer: residual attention then residual feed-forward.
pub fn attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &TransformerConfig,
    layer: usize,
    plane: PlaneId,
    e: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    Ok(attention_block_with_maps(tape, store, cfg, layer, plane, e, rng.as_deref_mut())?.0)
}

pub(crate) fn attention_block_with_maps(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &TransformerConfig,
    layer: usize,
    plane: PlaneId,
    e: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<Var>)> {
    let prefix = cfg.layer_prefix(layer, plane);
    let (attn, maps) = self_attention(tape, store, cfg, &prefix, e)?;
    let attn = dropout(tape, attn, cfg.dropout, rng.as_deref_mut());
    let e_bar = tape.add(e, attn);
    let bias = cfg.mode == AttentionMode::MultiHead;
    let h = linear(tape, store, &format!("{prefix}.ffn.fc1"), e_bar, bias)?;
    let h = tape.relu(h);
    let f = linear(tape, store, &format!("{prefix}.ffn.fc2"), h, bias)?;
    let f = dropout(tape, f, cfg.dropout, rng.as_deref_mut());
    let out = tape.add(e_bar, f);
    if tape.value(out).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("transformer layer {layer} output ({plane})")));
    }
    Ok((out, maps))
}

/// Applies the layer stack to prepared tokens `(N, d_emb)`.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &TransformerConfig,
    plane: PlaneId,
    e: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let shape = tape.value(e).shape();
    if shape.len() != 2 || shape[1] != cfg.d_emb {
        return Err(Error::Shape(format!(
            "transformer expects (N, {}) tokens, got {:?}",
            cfg.d_emb, shape
        )));
    }
    let mut h = e;
    for layer in 0..cfg.layers {
        h = attention_block(tape, store, cfg, layer, plane, h, rng.as_deref_mut())?;
    }
    Ok(h)
}

/// Whether a parameter name belongs to the transformer stack proper.
pub fn is_transformer_key(name: &str) -> bool {
    name.starts_with("transformer.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gradcheck, view2};
    use ndarray::Array2;
    use rand::SeedableRng;

    fn setup(cfg: &TransformerConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_transformer(cfg, &mut rng, &mut store, true);
        // Non-zero biases so the gradient check covers them.
        for (k, v) in store.iter_mut() {
            if k.ends_with("bias") {
                v.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
        }
        store
    }

    fn rand_mat(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn run(cfg: &TransformerConfig, store: &ParamStore, e: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone().into_dyn());
        let out = encode(&mut tape, store, cfg, PlaneId::Sagittal, ev, None).unwrap();
        view2(tape.value(out)).to_owned()
    }

    #[test]
    fn positional_encoding_rows_and_range() {
        let pe = positional_encoding(10, 16);
        for j in 0..16 {
            assert_eq!(pe[[0, j]], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        for n in 0..10 {
            for i in 0..8 {
                let w = 1.0 / 10000f64.powf(2.0 * i as f64 / 16.0);
                assert!((pe[[n, 2 * i]] - (n as f64 * w).sin()).abs() < 1e-15);
                assert!((pe[[n, 2 * i + 1]] - (n as f64 * w).cos()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn segment_vectors_are_per_plane_and_additive() {
        let cfg = TransformerConfig::default();
        let mut store = setup(&cfg, 1);
        let a = store.get(&segment_key(PlaneId::Axial)).unwrap().clone();
        assert_eq!(store.get(&segment_key(PlaneId::Axial)).unwrap(), &a);
        assert_ne!(store.get(&segment_key(PlaneId::Coronal)).unwrap(), &a);
        for plane in PlaneId::ALL {
            store.insert(segment_key(plane), zeros(&[16]));
        }
        let cfg = TransformerConfig {
            positional_encoding: false,
            ..cfg
        };
        let z = rand_mat(5, 16, 2);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone().into_dyn());
        let t = tokens(&mut tape, &store, &cfg, PlaneId::Coronal, zv, &[]).unwrap();
        assert_eq!(view2(tape.value(t)), z.view());
    }

    #[test]
    fn projection_free_single_token_doubles() {
        let cfg = TransformerConfig {
            mode: AttentionMode::ProjectionFree,
            ..TransformerConfig::default()
        };
        let mut store = setup(&cfg, 3);
        store.insert("transformer.0.ffn.fc2.weight", zeros(&[64, 16]));
        let e = rand_mat(1, 16, 4);
        let out = run(&cfg, &store, &e);
        for (o, x) in out.iter().zip(e.iter()) {
            assert!((o - 2.0 * x).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_feed_forward_is_residual_identity() {
        for mode in [AttentionMode::ProjectionFree, AttentionMode::MultiHead] {
            let cfg = TransformerConfig {
                mode,
                ..TransformerConfig::default()
            };
            for which in ["fc1", "fc2"] {
                let mut store = setup(&cfg, 5);
                let w = format!("transformer.0.ffn.{which}.weight");
                let shape = store.get(&w).unwrap().shape().to_vec();
                store.insert(w, zeros(&shape));
                for b in ["fc1", "fc2"] {
                    let key = format!("transformer.0.ffn.{b}.bias");
                    if let Ok(t) = store.get_mut(&key) {
                        t.fill(0.0);
                    }
                }
                let e = rand_mat(4, 16, 6);
                let mut tape = Tape::new();
                let ev = tape.constant(e.clone().into_dyn());
                let prefix = "transformer.0";
                let (attn, _) = self_attention(&mut tape, &store, &cfg, prefix, ev).unwrap();
                let e_bar = tape.add(ev, attn);
                let expect = view2(tape.value(e_bar)).to_owned();
                let out = run(&cfg, &store, &e);
                for (o, x) in out.iter().zip(expect.iter()) {
                    assert!((o - x).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn projection_free_matches_matrix_oracle() {
        let cfg = TransformerConfig {
            d_emb: 2,
            d_ff: 3,
            heads: 1,
            mode: AttentionMode::ProjectionFree,
            ..TransformerConfig::default()
        };
        let store = setup(&cfg, 7);
        let e = Array2::from_shape_vec((3, 2), vec![0.5, -1.0, 1.5, 0.25, -0.75, 2.0]).unwrap();
        // softmax(E E^T / sqrt 2) E by hand.
        let mut oracle = Array2::<f64>::zeros((3, 2));
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (e[[i, 0]] * e[[j, 0]] + e[[i, 1]] * e[[j, 1]]) / 2f64.sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let tot: f64 = ex.iter().sum();
            for j in 0..3 {
                for c in 0..2 {
                    oracle[[i, c]] += ex[j] / tot * e[[j, c]];
                }
            }
        }
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone().into_dyn());
        let (attn, maps) = self_attention(&mut tape, &store, &cfg, "transformer.0", ev).unwrap();
        for (a, b) in view2(tape.value(attn)).iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        for row in view2(tape.value(maps[0])).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_multi_head() {
        let cfg = TransformerConfig::default();
        let store = setup(&cfg, 8);
        let e = rand_mat(17, 16, 9);
        let mut tape = Tape::new();
        let ev = tape.constant(e.into_dyn());
        let (_, maps) =
            attention_block_with_maps(&mut tape, &store, &cfg, 0, PlaneId::Axial, ev, None).unwrap();
        assert_eq!(maps.len(), 4);
        for m in maps {
            for row in view2(tape.value(m)).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encode_preserves_shape_and_zero_weights_give_identity() {
        let cfg = TransformerConfig::default();
        let mut store = setup(&cfg, 10);
        for n in [1, 2, 9, 30] {
            assert_eq!(run(&cfg, &store, &rand_mat(n, 16, n as u64)).dim(), (n, 16));
        }
        for (k, v) in store.iter_mut() {
            if k.contains(".attn.o.") || k.contains(".ffn.fc2.") {
                v.fill(0.0);
            }
        }
        let e = rand_mat(6, 16, 11);
        assert_eq!(run(&cfg, &store, &e), e);
    }

    #[test]
    fn permutation_equivariance_only_without_positions() {
        let base = TransformerConfig::default();
        let store = setup(&base, 12);
        let z = rand_mat(7, 16, 13);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let permuted = z.select(ndarray::Axis(0), &perm);
        for with_pe in [false, true] {
            let cfg = TransformerConfig {
                positional_encoding: with_pe,
                ..base.clone()
            };
            let out_of = |z: &Array2<f64>| {
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone().into_dyn());
                let t = tokens(&mut tape, &store, &cfg, PlaneId::Sagittal, zv, &[]).unwrap();
                let o = encode(&mut tape, &store, &cfg, PlaneId::Sagittal, t, None).unwrap();
                view2(tape.value(o)).to_owned()
            };
            let a = out_of(&z).select(ndarray::Axis(0), &perm);
            let b = out_of(&permuted);
            let max_diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if with_pe {
                assert!(max_diff > 1e-6, "positional encoding should break equivariance");
            } else {
                assert!(max_diff < 1e-12, "{max_diff}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_both_modes() {
        for mode in [AttentionMode::MultiHead, AttentionMode::ProjectionFree] {
            let cfg = TransformerConfig {
                d_emb: 4,
                d_ff: 6,
                heads: if mode == AttentionMode::MultiHead { 2 } else { 1 },
                mode,
                ..TransformerConfig::default()
            };
            let mut params = setup(&cfg, 14);
            params.insert("input", rand_mat(3, 4, 15).into_dyn());
            let err = gradcheck::check(
                &params,
                |tape, p| {
                    let e = tape.param("input", p.get("input").unwrap());
                    let t = tokens(tape, p, &cfg, PlaneId::Coronal, e, &[1]).unwrap();
                    let o = encode(tape, p, &cfg, PlaneId::Coronal, t, None).unwrap();
                    let sq = tape.mul(o, o);
                    tape.sum(sq)
                },
                1e-6,
            );
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn mask_application() {
        let z = rand_mat(96, 16, 16);
        let seq = EncodingSequence::new(z.clone(), PlaneId::Sagittal);
        let token = ArrayD::from_elem(IxDyn(&[16]), 9.0);
        assert_eq!(apply_mask(&seq, &[], &token).unwrap(), seq);
        let positions: Vec<usize> = (0..9).map(|i| i * 10 + 3).collect();
        let masked = apply_mask(&seq, &positions, &token).unwrap();
        assert_eq!(masked.masked_positions(), positions);
        for i in 0..96 {
            if positions.contains(&i) {
                assert!(masked.values.row(i).iter().all(|&v| v == 9.0));
            } else {
                assert_eq!(masked.values.row(i), z.row(i));
            }
        }
        assert!(apply_mask(&seq, &[1, 1], &token).is_err());
        assert!(apply_mask(&seq, &[96], &token).is_err());
    }

    #[test]
    fn per_plane_weights_flag() {
        let cfg = TransformerConfig {
            shared_across_planes: false,
            ..TransformerConfig::default()
        };
        let store = setup(&cfg, 17);
        assert!(store.contains("transformer.0.axial.attn.q.weight"));
        assert!(!store.contains("transformer.0.attn.q.weight"));
        assert!(TransformerConfig { heads: 3, ..TransformerConfig::default() }.validate().is_err());
    }
}
