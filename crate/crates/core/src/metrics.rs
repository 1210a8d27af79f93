//! Evaluation metrics, parameter counting and metric reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::volume::LabelVolume;

/// Midranks (1-based, ties averaged) of `values`.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// `A(i|j)`: probability that a class-`i` sample scores higher on column
/// `i` than a class-`j` sample, ties counting one half.
fn pairwise_auc(scores: &Array2<f64>, labels: &[usize], i: usize, j: usize) -> f64 {
    let mut vals = Vec::new();
    let mut is_i = Vec::new();
    for (r, &l) in labels.iter().enumerate() {
        if l == i || l == j {
            vals.push(scores[[r, i]]);
            is_i.push(l == i);
        }
    }
    let ranks = midranks(&vals);
    let n_i = is_i.iter().filter(|&&b| b).count() as f64;
    let n_j = is_i.len() as f64 - n_i;
    let s_i: f64 = ranks.iter().zip(&is_i).filter(|(_, &b)| b).map(|(r, _)| r).sum();
    (s_i - n_i * (n_i + 1.0) / 2.0) / (n_i * n_j)
}

/// Hand and Till multi-class AUC over `scores (n, K)`.
pub fn mauc(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let k = scores.ncols();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("mAUC needs >= 2 classes, got {k}")));
    }
    if scores.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} score rows vs {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::UnknownLabel(bad as i64));
    }
    for c in 0..k {
        if !labels.contains(&c) {
            return Err(Error::MissingClass(c));
        }
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            total += (pairwise_auc(scores, labels, i, j) + pairwise_auc(scores, labels, j, i)) / 2.0;
        }
    }
    Ok(total * 2.0 / (k * (k - 1)) as f64)
}

/// mAUC restricted to the classes that occur in `labels` (at least two).
pub fn mauc_present(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() == scores.ncols() {
        return mauc(scores, labels);
    }
    if present.len() < 2 {
        return Err(Error::MissingClass(if present.first() == Some(&0) { 1 } else { 0 }));
    }
    let cols = scores.select(ndarray::Axis(1), &present);
    let relabeled: Vec<usize> = labels
        .iter()
        .map(|l| present.iter().position(|p| p == l).expect("present"))
        .collect();
    mauc(&cols, &relabeled)
}

pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("MAE of no samples".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / predictions.len() as f64)
}

/// Tumour regions as unions of labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    /// Whole tumour: labels 1, 2, 4.
    Wt,
    /// Tumour core: labels 1, 4.
    Tc,
    /// Enhancing tumour: label 4.
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::Wt => &[1, 2, 4],
            Region::Tc => &[1, 4],
            Region::Et => &[4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Wt => "wt",
            Region::Tc => "tc",
            Region::Et => "et",
        }
    }

    pub fn mask(self, labels: &LabelVolume) -> Array3<bool> {
        let set = self.labels();
        labels.labels.mapv(|v| set.contains(&v))
    }
}

/// `2|P ∩ T| / (|P| + |T|)` over region masks; 1 when both are empty.
pub fn dice(pred: &LabelVolume, truth: &LabelVolume, region: Region) -> Result<f64> {
    if pred.spatial() != truth.spatial() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.spatial(),
            truth.spatial()
        )));
    }
    let (p, t) = (region.mask(pred), region.mask(truth));
    let mut inter = 0usize;
    let mut sp = 0usize;
    let mut st = 0usize;
    for (&a, &b) in p.iter().zip(t.iter()) {
        inter += usize::from(a && b);
        sp += usize::from(a);
        st += usize::from(b);
    }
    if sp + st == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + st) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: BTreeMap<String, usize>,
}

fn module_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match first {
        "encoder" => format!("encoder.{}", parts.next().unwrap_or_default()),
        _ => first.to_string(),
    }
}

/// Element counts of all parameters, in total and per module.
pub fn count_parameters(store: &ParamStore) -> ParamCount {
    let mut breakdown = BTreeMap::new();
    for (name, t) in store.iter() {
        *breakdown.entry(module_of(name)).or_insert(0) += t.len();
    }
    ParamCount {
        total: store.numel(),
        breakdown,
    }
}

/// Named metric values.
pub type MetricValues = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    /// Mean over folds (or the single run's values).
    pub metrics: MetricValues,
    /// Population standard deviation over folds; empty for single runs.
    pub std: MetricValues,
    pub per_fold: Vec<MetricValues>,
    pub samples: usize,
    pub fingerprint: String,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (k, &v) in &self.metrics {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("metric {k}")));
            }
            let bounded = k.starts_with("mauc") || k.starts_with("dice");
            if (bounded && !(0.0..=1.0).contains(&v)) || (k.starts_with("mae") && v < 0.0) {
                return Err(Error::InvalidArgument(format!("metric {k} = {v} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `metric,mean,std` rows followed by `fold<k>` columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,std");
        for k in 0..self.per_fold.len() {
            let _ = write!(out, ",fold{k}");
        }
        out.push('\n');
        for (name, mean) in &self.metrics {
            let std = self.std.get(name).copied().unwrap_or(0.0);
            let _ = write!(out, "{name},{mean},{std}");
            for fold in &self.per_fold {
                let _ = write!(out, ",{}", fold.get(name).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }
}
