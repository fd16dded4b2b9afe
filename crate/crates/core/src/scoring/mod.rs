//! Cross-time and cross-population outlier scores and their fusion.
//!
//! Both scores compare per-pattern mean day embeddings: a user's train
//! days with the same pattern (day index mod f) are averaged into `h`,
//! the test days into `h_hat`.

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{DayEmbeddings, Model};
use crate::numerics::{cosine_sim, normalized, Tensor, NORM_EPS};

/// Rule for the distance between a day pattern and the centroid bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopulationMode {
    /// Dissimilarity to the closest centroid.
    Closest,
    /// Dissimilarity to the farthest centroid.
    Farthest,
}

impl PopulationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PopulationMode::Closest => "closest",
            PopulationMode::Farthest => "paper-eq11",
        }
    }
}

impl FromStr for PopulationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closest" => Ok(PopulationMode::Closest),
            "paper-eq11" => Ok(PopulationMode::Farthest),
            other => Err(Error::Config(format!("unknown score mode `{other}`"))),
        }
    }
}

impl fmt::Display for PopulationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub mode: PopulationMode,
    /// Weight of cross-time in the fused score.
    pub time_weight: f64,
    /// First test day; `None` uses the dataset's split day.
    pub split_day: Option<usize>,
    pub pattern_freq: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            mode: PopulationMode::Closest,
            time_weight: 0.5,
            split_day: None,
            pattern_freq: 7,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.time_weight) {
            return Err(Error::Config("score.time_weight must lie in [0, 1]".into()));
        }
        if self.pattern_freq == 0 {
            return Err(Error::Config("train.pattern_freq must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scores of one user before fusion. `None` marks an undefined score.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScore {
    pub user_id: String,
    pub cross_time: Option<f64>,
    pub cross_population: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserScore {
    pub user_id: String,
    pub cross_time: Option<f64>,
    pub cross_population: Option<f64>,
    pub fused: f64,
    /// 1-based position in the fused ranking.
    pub rank: usize,
}

/// Normalized mean of some day embeddings; `None` if there are none or
/// the mean vanishes.
pub fn mean_day_embedding(zs: &[&[f64]]) -> Option<Vec<f64>> {
    let first = zs.first()?;
    let mut acc = vec![0.0; first.len()];
    for z in zs {
        for (a, x) in acc.iter_mut().zip(z.iter()) {
            *a += x;
        }
    }
    let n = zs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    normalized(&acc, NORM_EPS)
}

/// Mean embedding per pattern `0..f` over the days in `days`.
pub fn pattern_means(z: &[Vec<f64>], days: std::ops::Range<usize>, f: usize) -> Vec<Option<Vec<f64>>> {
    (0..f)
        .map(|r| {
            let zs: Vec<&[f64]> = days.clone().filter(|d| d % f == r).map(|d| z[d].as_slice()).collect();
            mean_day_embedding(&zs)
        })
        .collect()
}

/// `1 - mean_d sim(h_d, h_hat_d)` over patterns present on both sides.
pub fn cross_time(h: &[Option<Vec<f64>>], h_hat: &[Option<Vec<f64>>]) -> Option<f64> {
    let sims: Vec<f64> = h
        .iter()
        .zip(h_hat)
        .filter_map(|(a, b)| Some(cosine_sim(a.as_ref()?, b.as_ref()?)))
        .collect();
    if sims.is_empty() {
        None
    } else {
        Some(1.0 - sims.iter().sum::<f64>() / sims.len() as f64)
    }
}

/// Largest per-pattern dissimilarity between `h_hat` and the centroids.
pub fn cross_population(h_hat: &[Option<Vec<f64>>], centroids: &Tensor, mode: PopulationMode) -> Option<f64> {
    let k = centroids.rows();
    h_hat
        .iter()
        .flatten()
        .map(|h| {
            let d = (0..k).map(|j| 1.0 - cosine_sim(h, centroids.row_slice(j)));
            match mode {
                PopulationMode::Closest => d.fold(f64::INFINITY, f64::min),
                PopulationMode::Farthest => d.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .reduce(f64::max)
}

/// Raw scores of every user from precomputed day embeddings.
pub fn raw_scores(z: &DayEmbeddings, centroids: &Tensor, split_day: usize, cfg: &ScoreConfig) -> Vec<RawScore> {
    z.iter()
        .map(|(user, days)| {
            let split = split_day.min(days.len());
            let h = pattern_means(days, 0..split, cfg.pattern_freq);
            let h_hat = pattern_means(days, split..days.len(), cfg.pattern_freq);
            RawScore {
                user_id: user.clone(),
                cross_time: cross_time(&h, &h_hat),
                cross_population: cross_population(&h_hat, centroids, cfg.mode),
            }
        })
        .collect()
}

fn min_max(values: impl Iterator<Item = Option<f64>> + Clone) -> impl Fn(Option<f64>) -> Option<f64> {
    let (lo, hi) = values
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 0.0) && lo.is_finite() {
        log::warn!("all defined scores of a channel are equal; its normalized values are 0");
    }
    move |v| v.map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 })
}

/// Min-max normalize both channels over the population and combine them;
/// users without a cross-time score use cross-population alone. Sorted by
/// fused score, ties by user id.
pub fn fuse(raw: &[RawScore], time_weight: f64) -> Result<Vec<UserScore>> {
    if raw.len() < 2 {
        return Err(Error::Data("fusion needs at least two users".into()));
    }
    if !(0.0..=1.0).contains(&time_weight) {
        return Err(Error::Config("score.time_weight must lie in [0, 1]".into()));
    }
    let nt = min_max(raw.iter().map(|r| r.cross_time));
    let np = min_max(raw.iter().map(|r| r.cross_population));
    let mut out: Vec<UserScore> = raw
        .iter()
        .map(|r| {
            let p = np(r.cross_population).unwrap_or(0.0);
            let fused = match nt(r.cross_time) {
                Some(t) => time_weight * t + (1.0 - time_weight) * p,
                None => p,
            };
            UserScore {
                user_id: r.user_id.clone(),
                cross_time: r.cross_time,
                cross_population: r.cross_population,
                fused,
                rank: 0,
            }
        })
        .collect();
    out.sort_by(|a, b| b.fused.total_cmp(&a.fused).then_with(|| a.user_id.cmp(&b.user_id)));
    for (i, s) in out.iter_mut().enumerate() {
        s.rank = i + 1;
    }
    Ok(out)
}

/// Embed and score every user of `ds`.
pub fn score(model: &Model, ds: &Dataset, cfg: &ScoreConfig) -> Result<Vec<UserScore>> {
    cfg.validate()?;
    let z = model.embed_days(ds)?;
    let split = cfg.split_day.unwrap_or(ds.split_day());
    fuse(&raw_scores(&z, model.centroids(), split, cfg), cfg.time_weight)
}

pub const SCORE_HEADER: &str = "user_id,cross_time,cross_population,fused,rank";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Score CSV with `preamble` (comment lines) first. Undefined scores are
/// empty fields.
pub fn render_scores(scores: &[UserScore], preamble: &str) -> String {
    let mut out = String::from(preamble);
    out.push_str(SCORE_HEADER);
    out.push('\n');
    for s in scores {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.user_id,
            fmt_opt(s.cross_time),
            fmt_opt(s.cross_population),
            s.fused,
            s.rank
        ));
    }
    out
}

pub fn parse_scores(text: &str, file: &str) -> Result<Vec<UserScore>> {
    let mut out = Vec::new();
    let mut seen_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != SCORE_HEADER {
                return Err(Error::parse(file, i + 1, format!("expected header `{SCORE_HEADER}`")));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::parse(file, i + 1, "expected 5 fields"));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::parse(file, i + 1, format!("bad number `{s}`")))
            }
        };
        out.push(UserScore {
            user_id: f[0].to_string(),
            cross_time: num(f[1])?,
            cross_population: num(f[2])?,
            fused: num(f[3])?.ok_or_else(|| Error::parse(file, i + 1, "missing fused score"))?,
            rank: f[4].parse().map_err(|_| Error::parse(file, i + 1, "bad rank"))?,
        });
    }
    Ok(out)
}
