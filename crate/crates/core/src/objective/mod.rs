//! Day-pattern consistency loss, soft clustering against a centroid bank,
//! pair sampling and the training loop.

mod train;

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::modality::DEFAULT_ALIGN_TEMP;
use crate::numerics::{Graph, SeededRng, Var};

pub use train::{plan_epoch, train, train_with, EpochRecord, Phase, TrainBatch, TrainReport};

/// How each day spreads its weight over the centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusteringMode {
    /// `softmax(-l / temp)`: the closest centroid dominates.
    Softmin,
    /// Weights proportional to the distance itself.
    Proportional,
}

impl ClusteringMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusteringMode::Softmin => "softmin",
            ClusteringMode::Proportional => "paper",
        }
    }
}

impl FromStr for ClusteringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmin" => Ok(ClusteringMode::Softmin),
            "paper" => Ok(ClusteringMode::Proportional),
            other => Err(Error::Config(format!("unknown clustering mode `{other}`"))),
        }
    }
}

impl fmt::Display for ClusteringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Alignment-only epochs at the start; ignored in joint mode.
    pub align_epochs: usize,
    pub batch: usize,
    /// Consistency temperature.
    pub temperature: f64,
    pub beta: f64,
    pub centroids: usize,
    pub pattern_freq: usize,
    pub negatives: usize,
    pub max_positives: usize,
    pub align_temperature: f64,
    pub clustering: ClusteringMode,
    pub clustering_temperature: f64,
    pub joint: bool,
    pub align_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            align_epochs: 50,
            batch: 128,
            temperature: 0.1,
            beta: 0.1,
            centroids: 10,
            pattern_freq: 7,
            negatives: 16,
            max_positives: 4,
            align_temperature: DEFAULT_ALIGN_TEMP,
            clustering: ClusteringMode::Softmin,
            clustering_temperature: 0.1,
            joint: false,
            align_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.batch", self.batch),
            ("train.centroids", self.centroids),
            ("train.pattern_freq", self.pattern_freq),
            ("train.negatives", self.negatives),
            ("train.max_positives", self.max_positives),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be at least 1")));
            }
        }
        let temps = [
            ("train.temperature", self.temperature),
            ("train.align_temperature", self.align_temperature),
            ("train.clustering_temperature", self.clustering_temperature),
        ];
        for (k, v) in temps {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("train.beta must be non-negative".into()));
        }
        if !(self.align_weight >= 0.0 && self.align_weight.is_finite()) {
            return Err(Error::Config("train.align_weight must be non-negative".into()));
        }
        if !self.joint && self.align_epochs > self.epochs {
            return Err(Error::Config("train.align_epochs exceeds train.epochs".into()));
        }
        Ok(())
    }
}

/// A day of one user, `(user, day_index)`.
pub type DayRef = (String, usize);

/// Positives and negatives for one anchor day, drawn over the whole train
/// split. Returns `None` when the anchor has no same-pattern train day.
pub fn sample_pairs(
    ds: &Dataset,
    anchor: (&str, usize),
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<Option<(Vec<DayRef>, Vec<DayRef>)>> {
    let (user, d) = anchor;
    let n_train = ds.train(user).len();
    if d >= n_train {
        return Err(Error::Data(format!("anchor {user}/{d} is not a train day")));
    }
    let f = cfg.pattern_freq;
    let pattern: Vec<usize> = train_pattern_days(ds, user, d, f).into_iter().collect();
    if pattern.is_empty() {
        return Ok(None);
    }
    let positives = rng
        .sample_indices(pattern.len(), cfg.max_positives.min(pattern.len()))
        .into_iter()
        .map(|i| (user.to_string(), pattern[i]))
        .collect();
    let pool: Vec<DayRef> = ds
        .users()
        .filter(|&v| v != user)
        .flat_map(|v| {
            (0..ds.train(v).len())
                .filter(move |&o| o == d || o.abs_diff(d) % f != 0)
                .map(move |o| (v.to_string(), o))
        })
        .collect();
    let negatives = (0..cfg.negatives.min(pool.len()))
        .map(|_| pool[rng.below(pool.len())].clone())
        .collect();
    Ok(Some((positives, negatives)))
}

/// `-log(s_pos / (s_pos + s_neg))` for one anchor `[1, d]` against
/// positives `[p, d]` and negatives `[m, d]`, using cosine similarity.
/// `None` if either set is empty.
pub fn consistency_loss(g: &mut Graph, anchor: Var, positives: Var, negatives: Var, temp: f64) -> Result<Option<Var>> {
    if !(temp > 0.0) {
        return Err(Error::Config(format!(
            "consistency temperature must be positive, got {temp}"
        )));
    }
    let p = g.value(positives).rows();
    let m = g.value(negatives).rows();
    if p == 0 || m == 0 {
        return Ok(None);
    }
    let a = g.l2_normalize(anchor);
    let cand = g.concat_rows(&[positives, negatives])?;
    let cand = g.l2_normalize(cand);
    let ct = g.transpose(cand);
    let sims = g.matmul(a, ct)?;
    let logits = g.scale(sims, 1.0 / temp);
    let all = g.masked_logsumexp(logits, Rc::new(vec![true; p + m]))?;
    let pos = g.masked_logsumexp(logits, Rc::new((0..p + m).map(|j| j < p).collect()))?;
    let l = g.sub(all, pos)?;
    Ok(Some(g.sum(l)))
}

/// Mean consistency loss over the anchors of a batch `z` `[B, d]`, where
/// `positives[i]` and `negatives[i]` index rows of `z`. Anchors with an
/// empty set are skipped; `None` if no anchor remains.
pub fn batch_consistency_loss(
    g: &mut Graph,
    z: Var,
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    temp: f64,
) -> Result<Option<Var>> {
    if !(temp > 0.0) {
        return Err(Error::Config(format!(
            "consistency temperature must be positive, got {temp}"
        )));
    }
    let b = g.value(z).rows();
    if positives.len() != b || negatives.len() != b {
        return Err(Error::Shape {
            op: "batch_consistency_loss",
            left: vec![b],
            right: vec![positives.len(), negatives.len()],
        });
    }
    let anchors: Vec<usize> = (0..b)
        .filter(|&i| !positives[i].is_empty() && !negatives[i].is_empty())
        .collect();
    if anchors.is_empty() {
        return Ok(None);
    }
    let mut pos_mask = vec![false; anchors.len() * b];
    let mut all_mask = vec![false; anchors.len() * b];
    for (r, &i) in anchors.iter().enumerate() {
        for &j in &positives[i] {
            pos_mask[r * b + j] = true;
            all_mask[r * b + j] = true;
        }
        for &j in &negatives[i] {
            all_mask[r * b + j] = true;
        }
    }
    let zn = g.l2_normalize(z);
    let a = g.gather_rows(zn, Rc::new(anchors.iter().map(|&i| Some(i)).collect()))?;
    let zt = g.transpose(zn);
    let sims = g.matmul(a, zt)?;
    let logits = g.scale(sims, 1.0 / temp);
    let all = g.masked_logsumexp(logits, Rc::new(all_mask))?;
    let pos = g.masked_logsumexp(logits, Rc::new(pos_mask))?;
    let l = g.sub(all, pos)?;
    Ok(Some(g.mean(l)))
}

/// Squared Euclidean distances `[B, K]` between rows of `z` and `b`.
pub fn squared_distances(g: &mut Graph, z: Var, b: Var) -> Result<Var> {
    let k = g.value(b).rows();
    let mut cols = Vec::with_capacity(k);
    for j in 0..k {
        let bj = g.slice_rows(b, j..j + 1)?;
        let neg = g.scale(bj, -1.0);
        let diff = g.add_row(z, neg)?;
        let sq = g.mul(diff, diff)?;
        cols.push(g.sum_cols(sq));
    }
    g.concat_cols(&cols)
}

/// Centroid weights `[B, K]` from squared distances; rows sum to one.
pub fn assignment_weights(g: &mut Graph, dist: Var, mode: ClusteringMode, temp: f64) -> Var {
    match mode {
        // Rows that are all zero fall back to 1/K inside row_normalize.
        ClusteringMode::Proportional => g.row_normalize(dist),
        ClusteringMode::Softmin => {
            let s = g.scale(dist, -1.0 / temp);
            g.softmax_rows(s)
        }
    }
}

/// Per-day clustering terms `sum_k delta_k l_k`, `[B, 1]`.
pub fn clustering_terms(g: &mut Graph, z: Var, b: Var, mode: ClusteringMode, temp: f64) -> Result<Var> {
    if mode == ClusteringMode::Softmin && !(temp > 0.0) {
        return Err(Error::Config(format!(
            "clustering temperature must be positive, got {temp}"
        )));
    }
    let dist = squared_distances(g, z, b)?;
    let w = assignment_weights(g, dist, mode, temp);
    let p = g.mul(w, dist)?;
    Ok(g.sum_cols(p))
}

/// Clustering loss averaged over the batch.
pub fn clustering_loss(g: &mut Graph, z: Var, b: Var, mode: ClusteringMode, temp: f64) -> Result<Var> {
    let t = clustering_terms(g, z, b, mode, temp)?;
    Ok(g.mean(t))
}

/// `consistency + beta * clustering`.
pub fn total_loss(g: &mut Graph, consistency: Var, clustering: Var, beta: f64) -> Result<Var> {
    let c = g.scale(clustering, beta);
    g.add(consistency, c)
}

/// Train days of `user` sharing `d`'s pattern, excluding `d`.
pub fn train_pattern_days(ds: &Dataset, user: &str, d: usize, f: usize) -> BTreeSet<usize> {
    (0..ds.train(user).len())
        .filter(|&o| o != d && o.abs_diff(d) % f == 0)
        .collect()
}
