//! Ranking metrics, per-class breakdowns, transfer evaluation and a
//! travel-distance baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{Dataset, Intensity, LabelTable, OutlierType};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::squared_distance;
use crate::scoring::{score, ScoreConfig, UserScore};

/// Users ordered by descending score, ties by user id.
pub fn rank(scores: &[(String, f64)]) -> Vec<String> {
    let mut v: Vec<&(String, f64)> = scores.iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().map(|(u, _)| u.clone()).collect()
}

/// Labeled outliers among the first `k` users of `ranking`.
pub fn top_k_hits(ranking: &[String], labels: &LabelTable, k: usize) -> usize {
    ranking.iter().take(k).filter(|u| labels.is_outlier(u)).count()
}

fn check_classes(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("metrics need both positive and negative labels".into()));
    }
    Ok((pos, neg))
}

/// Mean over positives of the precision at their rank. Ranks sort by
/// descending score; ties keep input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0;
    let mut sum = 0.0;
    for (r, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

/// Mann-Whitney estimate: the fraction of (positive, negative) pairs
/// ordered correctly, ties counting one half. Uses midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank of the tie block i..=j.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Top-`k` hits per (type, intensity) over every abnormal class.
pub fn breakdown(ranking: &[String], labels: &LabelTable, k: usize) -> BTreeMap<(OutlierType, Intensity), usize> {
    let mut out: BTreeMap<_, _> = OutlierType::ABNORMAL
        .iter()
        .flat_map(|&t| Intensity::LEVELS.iter().map(move |&i| ((t, i), 0)))
        .collect();
    for u in ranking.iter().take(k) {
        if let Some(l) = labels.get(u) {
            if l.is_outlier {
                *out.entry((l.kind, l.intensity)).or_insert(0) += 1;
            }
        }
    }
    out
}

/// Hits of one outlier type divided by its labeled count.
pub fn detection_rate(
    cells: &BTreeMap<(OutlierType, Intensity), usize>,
    labels: &LabelTable,
    kind: OutlierType,
) -> Option<f64> {
    let total = labels
        .labels
        .values()
        .filter(|l| l.is_outlier && l.kind == kind)
        .count();
    if total == 0 {
        return None;
    }
    let hits: usize = cells.iter().filter(|((t, _), _)| *t == kind).map(|(_, &c)| c).sum();
    Some(hits as f64 / total as f64)
}

/// Per user: shift of the mean daily travel distance from train to test,
/// in train standard deviations.
pub fn distance_baseline(ds: &Dataset) -> Vec<(String, f64)> {
    const EPS: f64 = 1e-6;
    let travel = |pts: &[crate::data::StayPoint]| -> f64 {
        pts.windows(2)
            .map(|w| squared_distance(&[w[0].x, w[0].y], &[w[1].x, w[1].y]).sqrt())
            .sum()
    };
    ds.users()
        .map(|u| {
            let train: Vec<f64> = ds.train(u).iter().map(|d| travel(&d.points)).collect();
            let test: Vec<f64> = ds.test(u).iter().map(|d| travel(&d.points)).collect();
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            let m = mean(&train);
            let var = if train.is_empty() {
                0.0
            } else {
                train.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / train.len() as f64
            };
            (u.to_string(), (mean(&test) - m).abs() / (var.sqrt() + EPS))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Channel {
    CrossTime,
    CrossPopulation,
    Fused,
    Distance,
}

impl Channel {
    pub const MODEL: [Channel; 3] = [Channel::CrossTime, Channel::CrossPopulation, Channel::Fused];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::CrossTime => "cross_time",
            Channel::CrossPopulation => "cross_population",
            Channel::Fused => "fused",
            Channel::Distance => "distance_baseline",
        }
    }
}

/// Per-user values of one model channel; undefined scores rank last.
pub fn channel_scores(scores: &[UserScore], channel: Channel) -> Vec<(String, f64)> {
    scores
        .iter()
        .map(|s| {
            let v = match channel {
                Channel::CrossTime => s.cross_time,
                Channel::CrossPopulation => s.cross_population,
                Channel::Fused | Channel::Distance => Some(s.fused),
            };
            (s.user_id.clone(), v.unwrap_or(f64::NEG_INFINITY))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMetrics {
    pub channel: Channel,
    pub auc: f64,
    pub ap: f64,
    /// `(k, hits)` per cutoff.
    pub top_k: Vec<(usize, usize)>,
}

impl ChannelMetrics {
    pub fn hits(&self, k: usize) -> Option<usize> {
        self.top_k.iter().find(|(c, _)| *c == k).map(|(_, h)| *h)
    }
}

/// `ceil(0.1 * users)`, at least 1.
pub fn scaled_k(n_users: usize) -> usize {
    n_users.div_ceil(10).max(1)
}

/// Cutoffs plus the scaled one, sorted and deduplicated.
pub fn cutoffs(ks: &[usize], n_users: usize) -> Vec<usize> {
    let mut v: Vec<usize> = ks.iter().copied().chain([scaled_k(n_users)]).collect();
    v.sort_unstable();
    v.dedup();
    v
}

pub fn channel_metrics(
    channel: Channel,
    scores: &[(String, f64)],
    labels: &LabelTable,
    ks: &[usize],
) -> Result<ChannelMetrics> {
    let y: Vec<bool> = scores.iter().map(|(u, _)| labels.is_outlier(u)).collect();
    let s: Vec<f64> = scores.iter().map(|(_, v)| *v).collect();
    let ranking = rank(scores);
    Ok(ChannelMetrics {
        channel,
        auc: roc_auc(&s, &y)?,
        ap: average_precision(&s, &y)?,
        top_k: cutoffs(ks, scores.len())
            .into_iter()
            .map(|k| (k, top_k_hits(&ranking, labels, k)))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub n_users: usize,
    pub n_outliers: usize,
    pub channels: Vec<ChannelMetrics>,
    pub baseline: Option<ChannelMetrics>,
    /// Channel with the highest AUC, first on ties.
    pub best: Channel,
    /// Scaled Top-K hits per class for the best channel.
    pub breakdown: BTreeMap<(OutlierType, Intensity), usize>,
}

impl Evaluation {
    pub fn channel(&self, c: Channel) -> Option<&ChannelMetrics> {
        self.channels.iter().find(|m| m.channel == c)
    }

    pub fn best_metrics(&self) -> &ChannelMetrics {
        self.channel(self.best).expect("best channel is evaluated")
    }
}

/// Metrics for all three model channels, optionally against the distance
/// baseline computed on `data`.
pub fn evaluate(scores: &[UserScore], labels: &LabelTable, ks: &[usize], data: Option<&Dataset>) -> Result<Evaluation> {
    for s in scores {
        if labels.get(&s.user_id).is_none() {
            return Err(Error::Data(format!("no label for user {}", s.user_id)));
        }
    }
    let channels = Channel::MODEL
        .iter()
        .map(|&c| channel_metrics(c, &channel_scores(scores, c), labels, ks))
        .collect::<Result<Vec<_>>>()?;
    let best = channels
        .iter()
        .fold(None::<&ChannelMetrics>, |acc, m| match acc {
            Some(a) if a.auc >= m.auc => Some(a),
            _ => Some(m),
        })
        .expect("three channels")
        .channel;
    let baseline = data
        .map(|ds| channel_metrics(Channel::Distance, &distance_baseline(ds), labels, ks))
        .transpose()?;
    let ranking = rank(&channel_scores(scores, best));
    Ok(Evaluation {
        n_users: scores.len(),
        n_outliers: scores.iter().filter(|s| labels.is_outlier(&s.user_id)).count(),
        breakdown: breakdown(&ranking, labels, scaled_k(scores.len())),
        channels,
        baseline,
        best,
    })
}

/// Score a dataset with a model trained elsewhere. No parameter changes.
pub fn transfer_eval(
    model: &Model,
    target: &Dataset,
    labels: &LabelTable,
    cfg: &ScoreConfig,
    ks: &[usize],
) -> Result<Evaluation> {
    let scores = score(model, target, cfg)?;
    evaluate(&scores, labels, ks, Some(target))
}

fn render_metrics_table(out: &mut String, title: &str, rows: &[(&str, &ChannelMetrics)]) {
    let Some((_, first)) = rows.first() else { return };
    let ks: Vec<usize> = first.top_k.iter().map(|(k, _)| *k).collect();
    let _ = writeln!(out, "\n[{title}]");
    let mut header = String::from("row,channel,auc,ap");
    for k in &ks {
        let _ = write!(header, ",top{k}");
    }
    let _ = writeln!(out, "{header}");
    for (name, m) in rows {
        let _ = write!(out, "{name},{},{:.6},{:.6}", m.channel.as_str(), m.auc, m.ap);
        for k in &ks {
            let _ = write!(out, ",{}", m.hits(*k).unwrap_or(0));
        }
        let _ = writeln!(out);
    }
}

/// Report text: key/value lines followed by tables. `preamble` carries
/// provenance; `epoch_seconds` may be empty.
pub fn render_report(preamble: &str, ev: &Evaluation, transfer: Option<&Evaluation>, epoch_seconds: &[f64]) -> String {
    let mut out = String::from(preamble);
    let _ = writeln!(out, "users = {}", ev.n_users);
    let _ = writeln!(out, "outliers = {}", ev.n_outliers);
    let _ = writeln!(out, "scaled_k = {}", scaled_k(ev.n_users));
    let _ = writeln!(out, "best_channel = {}", ev.best.as_str());
    let b = ev.best_metrics();
    let _ = writeln!(out, "best_auc = {:.6}", b.auc);
    let _ = writeln!(out, "best_ap = {:.6}", b.ap);
    let _ = writeln!(
        out,
        "fusion_rule = min-max normalized, weighted sum of cross_time and cross_population"
    );
    let mut rows: Vec<(&str, &ChannelMetrics)> = ev.channels.iter().map(|m| ("model", m)).collect();
    if let Some(bm) = &ev.baseline {
        rows.push(("baseline", bm));
    }
    render_metrics_table(&mut out, "metrics", &rows);
    let _ = writeln!(out, "\n[breakdown]\ntype,intensity,hits");
    for ((t, i), c) in &ev.breakdown {
        let _ = writeln!(out, "{t},{i},{c}");
    }
    if let Some(tr) = transfer {
        let mut rows: Vec<(&str, &ChannelMetrics)> = ev.channels.iter().map(|m| ("original", m)).collect();
        rows.extend(tr.channels.iter().map(|m| ("transfer", m)));
        render_metrics_table(&mut out, "transfer", &rows);
    }
    if !epoch_seconds.is_empty() {
        let _ = writeln!(out, "\n[timing]\nepoch,seconds");
        for (e, s) in epoch_seconds.iter().enumerate() {
            let _ = writeln!(out, "{e},{s:.4}");
        }
        let mean = epoch_seconds.iter().sum::<f64>() / epoch_seconds.len() as f64;
        let _ = writeln!(out, "mean,{mean:.4}");
    }
    out
}

#[cfg(test)]
mod tests;
