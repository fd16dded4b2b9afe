use std::time::Instant;

use serde::Serialize;

use super::{batch_consistency_loss, clustering_loss, total_loss, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::modality::{align_loss, Modality, PointBatch};
use crate::model::Model;
use crate::numerics::{lr_at, seeded_rng, stream_id_of, AdamState, Graph, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Align,
    Encode,
    Joint,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_align: Option<f64>,
    pub mean_consistency: Option<f64>,
    pub mean_clustering: Option<f64>,
    pub lr: f64,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    /// Consistency plus weighted clustering, when both were measured.
    pub fn total(&self, beta: f64) -> Option<f64> {
        Some(self.mean_consistency? + beta * self.mean_clustering?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch; kept out of the log so logs stay
    /// reproducible.
    pub epoch_seconds: Vec<f64>,
    /// Anchors without a usable positive or negative, summed over epochs.
    pub skipped_anchors: usize,
    /// Alignment batches with fewer than two staypoints.
    pub skipped_align_batches: usize,
}

/// Days of one batch, as `(user index, day index)`, with in-batch positive
/// and negative row indices per anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub days: Vec<(usize, usize)>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Lay out one epoch of consistency batches.
///
/// Each user's train days are grouped by pattern (day index mod f),
/// shuffled and cut into groups of at most `max_positives + 1` days, so
/// every member's positives are the rest of its group. Groups are shuffled
/// and packed into batches of about `batch` days. Negatives are sampled
/// per anchor among the batch's days of other users outside the anchor's
/// pattern. Returns the batches and the number of anchors left without
/// positives or negatives.
pub fn plan_epoch(ds: &Dataset, cfg: &TrainConfig, rng: &mut SeededRng) -> (Vec<TrainBatch>, usize) {
    let f = cfg.pattern_freq;
    let cap = cfg.max_positives + 1;
    let mut skipped = 0;
    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    for (ui, user) in ds.users().enumerate() {
        let n = ds.train(user).len();
        for r in 0..f.min(n) {
            let mut days: Vec<usize> = (r..n).step_by(f).collect();
            if days.len() < 2 {
                skipped += days.len();
                continue;
            }
            rng.shuffle(&mut days);
            let k = days.len().div_ceil(cap);
            let (base, extra) = (days.len() / k, days.len() % k);
            let mut it = days.into_iter();
            for gi in 0..k {
                let size = base + usize::from(gi < extra);
                groups.push(it.by_ref().take(size).map(|d| (ui, d)).collect());
            }
        }
    }
    rng.shuffle(&mut groups);
    let mut batches = Vec::new();
    let mut cur: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut cur_len = 0;
    for g in groups {
        if cur_len + g.len() > cfg.batch && !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
            cur_len = 0;
        }
        cur_len += g.len();
        cur.push(g);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    let out = batches
        .into_iter()
        .map(|gs| {
            let mut days = Vec::new();
            let mut positives = Vec::new();
            for g in &gs {
                let start = days.len();
                for i in 0..g.len() {
                    positives.push((start..start + g.len()).filter(|&j| j != start + i).collect());
                }
                days.extend_from_slice(g);
            }
            let mut negatives = Vec::with_capacity(days.len());
            for &(u, d) in &days {
                let eligible: Vec<usize> = days
                    .iter()
                    .enumerate()
                    .filter(|(_, &(v, o))| v != u && (o == d || o.abs_diff(d) % f != 0))
                    .map(|(j, _)| j)
                    .collect();
                let take = cfg.negatives.min(eligible.len());
                let mut pick: Vec<usize> = rng
                    .sample_indices(eligible.len(), take)
                    .into_iter()
                    .map(|j| eligible[j])
                    .collect();
                pick.sort_unstable();
                if pick.is_empty() {
                    skipped += 1;
                }
                negatives.push(pick);
            }
            TrainBatch {
                days,
                positives,
                negatives,
            }
        })
        .collect();
    (out, skipped)
}

fn take_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row_slice(r));
    }
    Tensor::matrix(rows.len(), c, data).expect("row gather shape")
}

fn take_points(b: &PointBatch, rows: &[usize]) -> PointBatch {
    PointBatch {
        semantic: take_rows(&b.semantic, rows),
        spatial: take_rows(&b.spatial, rows),
        temporal: take_rows(&b.temporal, rows),
    }
}

/// Per user: stacked train-day rows of some per-point tensor and the row
/// offset of every day.
struct UserRows {
    rows: Tensor,
    offsets: Vec<usize>,
}

impl UserRows {
    fn day(&self, d: usize) -> std::ops::Range<usize> {
        self.offsets[d]..self.offsets[d + 1]
    }
}

fn rng_for(cfg: &TrainConfig, parts: &[&str]) -> SeededRng {
    seeded_rng(cfg.seed, stream_id_of(parts))
}

fn check_finite(v: f64, epoch: usize, batch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, batch })
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, ds, cfg, |_, _| {})
}

/// Train and call `on_epoch` with every log record and its wall time.
pub fn train_with(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.centroids != model.config.centroids {
        return Err(Error::Config(format!(
            "model has {} centroids but training asks for {}",
            model.config.centroids, cfg.centroids
        )));
    }
    model.embedder.check_coverage(&ds.vocabulary)?;
    let n_train_days: usize = ds.users().map(|u| ds.train(u).len()).sum();
    if n_train_days == 0 {
        return Err(Error::Data("the train split is empty".into()));
    }
    let n_users = ds.n_users();
    if cfg.centroids * 5 > n_users {
        log::warn!(
            "{} centroids for {n_users} users; K should stay well below the user count",
            cfg.centroids
        );
    }

    // Raw per-point inputs of every train day, grouped by user.
    let mut points = Vec::with_capacity(n_users);
    for user in ds.users() {
        let days = ds.train(user);
        let mut offsets = vec![0];
        for d in days {
            offsets.push(offsets.last().unwrap() + d.points.len());
        }
        points.push((model.point_batch(days, &ds.header)?, offsets));
    }

    let mut report = TrainReport::default();
    let mut emit = |report: &mut TrainReport, rec: EpochRecord, started: Instant| {
        let secs = started.elapsed().as_secs_f64();
        log::debug!("{}", rec.to_json());
        on_epoch(&rec, secs);
        report.log.push(rec);
        report.epoch_seconds.push(secs);
    };

    let align_epochs = if cfg.joint { 0 } else { cfg.align_epochs };
    if align_epochs > 0 {
        Modality::set_mappers_trainable(&mut model.store, true);
        let all_points = PointBatch {
            semantic: concat_tensors(points.iter().map(|(b, _)| &b.semantic)),
            spatial: concat_tensors(points.iter().map(|(b, _)| &b.spatial)),
            temporal: concat_tensors(points.iter().map(|(b, _)| &b.temporal)),
        };
        let mut adam = AdamState::new(lr_at(0));
        for epoch in 0..align_epochs {
            let started = Instant::now();
            adam.lr = lr_at(epoch);
            let mut rng = rng_for(cfg, &["align", &epoch.to_string()]);
            let mut order: Vec<usize> = (0..all_points.len()).collect();
            rng.shuffle(&mut order);
            let mut losses = Vec::new();
            for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
                if chunk.len() < 2 {
                    report.skipped_align_batches += 1;
                    continue;
                }
                let batch = take_points(&all_points, chunk);
                let mut g = Graph::new();
                let parts = model.modality.modalities(&mut g, &model.store, &batch)?;
                let Some(loss) = align_loss(&mut g, parts.0, parts.1, parts.2, cfg.align_temperature)? else {
                    continue;
                };
                let v = g.value(loss).item();
                check_finite(v, epoch, bi)?;
                losses.push(v);
                let grads = g.backward(loss);
                adam.step(&mut model.store, &grads.param_grads());
            }
            let rec = EpochRecord {
                epoch,
                phase: Phase::Align,
                mean_align: mean(&losses),
                mean_consistency: None,
                mean_clustering: None,
                lr: adam.lr,
            };
            emit(&mut report, rec, started);
        }
    }

    // Mappers are frozen from here on unless training jointly, so their
    // contribution to the fusion input is fixed and can be cached.
    Modality::set_mappers_trainable(&mut model.store, cfg.joint);
    let cached: Vec<UserRows> = if cfg.joint {
        Vec::new()
    } else {
        points
            .iter()
            .map(|(b, offsets)| {
                Ok(UserRows {
                    rows: if b.is_empty() {
                        Tensor::zeros(&[0, 3 * model.dim()])
                    } else {
                        model.fusion_values(b)?
                    },
                    offsets: offsets.clone(),
                })
            })
            .collect::<Result<_>>()?
    };
    init_centroids(model, ds, cfg)?;

    let mut adam = AdamState::new(lr_at(align_epochs));
    let users: Vec<&str> = ds.users().collect();
    for epoch in align_epochs..cfg.epochs {
        let started = Instant::now();
        adam.lr = lr_at(epoch);
        let mut rng = rng_for(cfg, &["epoch", &epoch.to_string()]);
        let (batches, skipped) = plan_epoch(ds, cfg, &mut rng);
        report.skipped_anchors += skipped;
        let (mut cons, mut clus, mut aligns) = (Vec::new(), Vec::new(), Vec::new());
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let lens: Vec<usize> = batch
                .days
                .iter()
                .map(|&(u, d)| ds.train(users[u])[d].points.len())
                .collect();
            let mut align = None;
            let x = if cfg.joint {
                let pb = take_points_multi(&points, &batch.days);
                if pb.is_empty() {
                    None
                } else {
                    let parts = model.modality.modalities(&mut g, &model.store, &pb)?;
                    align = align_loss(&mut g, parts.0, parts.1, parts.2, cfg.align_temperature)?;
                    Some(model.modality.fusion_input(&mut g, parts, model.config.ablation)?)
                }
            } else {
                let mut data = Vec::new();
                let mut n = 0;
                for &(u, d) in &batch.days {
                    let c = &cached[u];
                    for r in c.day(d) {
                        data.extend_from_slice(c.rows.row_slice(r));
                        n += 1;
                    }
                }
                if n == 0 {
                    None
                } else {
                    Some(g.constant(Tensor::matrix(n, 3 * model.dim(), data)?))
                }
            };
            let z = model.encode_fused(&mut g, &model.store, x, &lens)?;
            let Some(c) = batch_consistency_loss(&mut g, z, &batch.positives, &batch.negatives, cfg.temperature)?
            else {
                continue;
            };
            let b = g.param(&model.store, model.centroid_id());
            let cl = clustering_loss(&mut g, z, b, cfg.clustering, cfg.clustering_temperature)?;
            let mut loss = total_loss(&mut g, c, cl, cfg.beta)?;
            if let Some(a) = align {
                let a_w = g.scale(a, cfg.align_weight);
                loss = g.add(loss, a_w)?;
                aligns.push(g.value(a).item());
            }
            let v = g.value(loss).item();
            check_finite(v, epoch, bi)?;
            cons.push(g.value(c).item());
            clus.push(g.value(cl).item());
            let grads = g.backward(loss);
            adam.step(&mut model.store, &grads.param_grads());
        }
        let rec = EpochRecord {
            epoch,
            phase: if cfg.joint { Phase::Joint } else { Phase::Encode },
            mean_align: mean(&aligns),
            mean_consistency: mean(&cons),
            mean_clustering: mean(&clus),
            lr: adam.lr,
        };
        emit(&mut report, rec, started);
    }
    Modality::set_mappers_trainable(&mut model.store, true);
    Ok(report)
}

fn take_points_multi(points: &[(PointBatch, Vec<usize>)], days: &[(usize, usize)]) -> PointBatch {
    let mut parts: Vec<PointBatch> = Vec::with_capacity(days.len());
    for &(u, d) in days {
        let (b, offsets) = &points[u];
        let rows: Vec<usize> = (offsets[d]..offsets[d + 1]).collect();
        parts.push(take_points(b, &rows));
    }
    PointBatch {
        semantic: concat_tensors(parts.iter().map(|p| &p.semantic)),
        spatial: concat_tensors(parts.iter().map(|p| &p.spatial)),
        temporal: concat_tensors(parts.iter().map(|p| &p.temporal)),
    }
}

fn concat_tensors<'a>(ts: impl Iterator<Item = &'a Tensor>) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for t in ts {
        cols = t.cols();
        rows += t.rows();
        data.extend_from_slice(t.data());
    }
    Tensor::matrix(rows, cols, data).expect("stacked rows")
}

/// Centroids start at the embeddings of `K` distinct random train days.
fn init_centroids(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let all: Vec<(&str, usize)> = ds
        .users()
        .flat_map(|u| (0..ds.train(u).len()).map(move |d| (u, d)))
        .collect();
    if all.len() < cfg.centroids {
        return Err(Error::Data(format!(
            "{} centroids need at least as many train days, found {}",
            cfg.centroids,
            all.len()
        )));
    }
    let mut rng = rng_for(cfg, &["centroids"]);
    let picks = rng.sample_indices(all.len(), cfg.centroids);
    let days: Vec<_> = picks.iter().map(|&i| &ds.train(all[i].0)[all[i].1]).collect();
    let z = model.embed(&days, &ds.header)?;
    let data = z.into_iter().flatten().collect();
    model.set_centroids(Tensor::matrix(cfg.centroids, model.dim(), data)?)
}
