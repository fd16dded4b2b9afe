//! Per-staypoint embeddings in a shared semantic space.
//!
//! Categories come from a frozen embedding table; location and time go
//! through small learnable mappers trained to land near the category
//! vector of the same staypoint.

mod embedder;

use std::rc::Rc;

use crate::data::{DatasetHeader, StayPoint, SECONDS_PER_DAY, WEEK};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, SeededRng, Tensor, Var};

pub use embedder::{parse_external, render_external, EmbedderMode, SemanticEmbedder};

/// Shared embedding width.
pub const EMBED_DIM: usize = 64;
/// Weekday one-hot plus sin/cos at 24h and 12h periods.
pub const TEMPORAL_FEATURES: usize = WEEK + 4;
pub const SPATIAL_FEATURES: usize = 2;
/// Default alignment temperature.
pub const DEFAULT_ALIGN_TEMP: f64 = 0.1;

/// Channels removed from the fused point embedding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_semantic: bool,
    pub no_spatial: bool,
    pub no_temporal: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        no_semantic: false,
        no_spatial: false,
        no_temporal: false,
    };

    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "none" | "" => {}
            "no-semantic" => a.no_semantic = true,
            "no-spatial" => a.no_spatial = true,
            "no-temporal" => a.no_temporal = true,
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(a)
    }

    pub fn name(self) -> &'static str {
        match (self.no_semantic, self.no_spatial, self.no_temporal) {
            (false, false, false) => "none",
            (true, false, false) => "no-semantic",
            (false, true, false) => "no-spatial",
            (false, false, true) => "no-temporal",
            _ => "custom",
        }
    }
}

pub fn spatial_features(p: &StayPoint) -> [f64; SPATIAL_FEATURES] {
    [p.x, p.y]
}

pub fn temporal_features(p: &StayPoint, header: &DatasetHeader) -> [f64; TEMPORAL_FEATURES] {
    let offset = p.t - header.epoch;
    let day = offset.div_euclid(SECONDS_PER_DAY);
    let weekday = (day + header.epoch_weekday as i64).rem_euclid(WEEK as i64) as usize;
    let frac = offset.rem_euclid(SECONDS_PER_DAY) as f64 / SECONDS_PER_DAY as f64;
    let angle = std::f64::consts::TAU * frac;
    let mut f = [0.0; TEMPORAL_FEATURES];
    f[weekday] = 1.0;
    f[WEEK] = angle.sin();
    f[WEEK + 1] = angle.cos();
    f[WEEK + 2] = (2.0 * angle).sin();
    f[WEEK + 3] = (2.0 * angle).cos();
    f
}

/// Raw per-point inputs for a batch of staypoints.
#[derive(Debug, Clone)]
pub struct PointBatch {
    /// Frozen category vectors, `[n, d]`.
    pub semantic: Tensor,
    pub spatial: Tensor,
    pub temporal: Tensor,
}

impl PointBatch {
    pub fn build<'a>(
        points: impl IntoIterator<Item = &'a StayPoint>,
        header: &DatasetHeader,
        embedder: &SemanticEmbedder,
    ) -> Result<Self> {
        let (mut sem, mut sp, mut tm) = (Vec::new(), Vec::new(), Vec::new());
        let mut n = 0;
        for p in points {
            sem.extend(embedder.embed(&p.category)?);
            sp.extend(spatial_features(p));
            tm.extend(temporal_features(p, header));
            n += 1;
        }
        Ok(Self {
            semantic: Tensor::matrix(n, embedder.dim(), sem)?,
            spatial: Tensor::matrix(n, SPATIAL_FEATURES, sp)?,
            temporal: Tensor::matrix(n, TEMPORAL_FEATURES, tm)?,
        })
    }

    pub fn len(&self) -> usize {
        self.semantic.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Two-layer feed-forward mapper `input -> d`.
#[derive(Debug, Clone, Copy)]
pub struct Mapper {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mapper {
    fn build(store: &mut ParamStore, prefix: &str, input: usize, dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            w1: store.insert_glorot(format!("{prefix}.w1"), input, dim, rng),
            b1: store.insert_zeros(format!("{prefix}.b1"), &[1, dim]),
            w2: store.insert_glorot(format!("{prefix}.w2"), dim, dim, rng),
            b2: store.insert_zeros(format!("{prefix}.b2"), &[1, dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.tanh(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }
}

/// Spatial and temporal mappers plus the fusion projection.
#[derive(Debug, Clone, Copy)]
pub struct Modality {
    pub dim: usize,
    pub spatial: Mapper,
    pub temporal: Mapper,
    fuse_w: ParamId,
    fuse_b: ParamId,
}

pub const SPATIAL_PREFIX: &str = "modality.spatial";
pub const TEMPORAL_PREFIX: &str = "modality.temporal";
pub const FUSION_PREFIX: &str = "modality.fuse";

impl Modality {
    pub fn build(store: &mut ParamStore, dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            dim,
            spatial: Mapper::build(store, SPATIAL_PREFIX, SPATIAL_FEATURES, dim, rng),
            temporal: Mapper::build(store, TEMPORAL_PREFIX, TEMPORAL_FEATURES, dim, rng),
            fuse_w: store.insert_glorot(format!("{FUSION_PREFIX}.w"), 3 * dim, dim, rng),
            fuse_b: store.insert_zeros(format!("{FUSION_PREFIX}.b"), &[1, dim]),
        }
    }

    /// Freeze or unfreeze both mappers.
    pub fn set_mappers_trainable(store: &mut ParamStore, trainable: bool) {
        store.set_trainable_prefix(SPATIAL_PREFIX, trainable);
        store.set_trainable_prefix(TEMPORAL_PREFIX, trainable);
    }

    /// Mapper outputs `(d_c, d_s, d_t)` for a batch.
    pub fn modalities(&self, g: &mut Graph, store: &ParamStore, batch: &PointBatch) -> Result<(Var, Var, Var)> {
        let dc = g.constant(batch.semantic.clone());
        let xs = g.constant(batch.spatial.clone());
        let xt = g.constant(batch.temporal.clone());
        let ds = self.spatial.forward(g, store, xs)?;
        let dt = self.temporal.forward(g, store, xt)?;
        Ok((dc, ds, dt))
    }

    /// `concat(d_c, d_s, d_t)` with ablated blocks replaced by zeros.
    pub fn fusion_input(&self, g: &mut Graph, parts: (Var, Var, Var), ablation: Ablation) -> Result<Var> {
        let (dc, ds, dt) = parts;
        let n = g.value(dc).rows();
        let zero = |g: &mut Graph| g.constant(Tensor::zeros(&[n, self.dim]));
        let dc = if ablation.no_semantic { zero(g) } else { dc };
        let ds = if ablation.no_spatial { zero(g) } else { ds };
        let dt = if ablation.no_temporal { zero(g) } else { dt };
        g.concat_cols(&[dc, ds, dt])
    }

    /// Fusion inputs evaluated outside any training graph, `[n, 3d]`.
    pub fn fusion_input_values(&self, store: &ParamStore, batch: &PointBatch, ablation: Ablation) -> Result<Tensor> {
        let mut g = Graph::new();
        let parts = self.modalities(&mut g, store, batch)?;
        let x = self.fusion_input(&mut g, parts, ablation)?;
        Ok(g.value(x).clone())
    }

    /// Linear projection of fusion inputs followed by unit normalization.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.fuse_w);
        let b = g.param(store, self.fuse_b);
        let h = g.matmul(x, w)?;
        let h = g.add_row(h, b)?;
        Ok(g.l2_normalize(h))
    }

    /// Padded `[cutoff_len, d]` point embeddings and their mask for one day.
    pub fn point_embeddings(
        &self,
        store: &ParamStore,
        batch: &PointBatch,
        cutoff_len: usize,
        ablation: Ablation,
    ) -> Result<(Tensor, Vec<bool>)> {
        let n = batch.len().min(cutoff_len);
        let mut out = Tensor::zeros(&[cutoff_len, self.dim]);
        if n > 0 {
            let mut g = Graph::new();
            let parts = self.modalities(&mut g, store, batch)?;
            let x = self.fusion_input(&mut g, parts, ablation)?;
            let z = self.fuse(&mut g, store, x)?;
            for i in 0..n {
                out.row_slice_mut(i).copy_from_slice(g.value(z).row_slice(i));
            }
        }
        Ok((out, (0..cutoff_len).map(|i| i < n).collect()))
    }
}

/// Positive pairs and in-batch negatives for a set of staypoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairs {
    /// Staypoint index whose own category is its positive.
    pub positives: Vec<usize>,
    /// For each anchor, the staypoints whose categories act as negatives.
    pub negatives: Vec<Vec<usize>>,
}

/// Every staypoint is positive with its own category and negative with the
/// category of every other staypoint in the batch, duplicates included.
pub fn build_pairs(n: usize) -> Pairs {
    if n < 2 {
        return Pairs {
            positives: Vec::new(),
            negatives: Vec::new(),
        };
    }
    Pairs {
        positives: (0..n).collect(),
        negatives: (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
    }
}

/// One InfoNCE direction: rows anchored at `anchor_i`, candidates
/// `other_j`, positive on the diagonal. Returns `[n, 1]` per-anchor terms.
fn info_nce_rows(g: &mut Graph, anchor: Var, other: Var, tau: f64) -> Result<Var> {
    let n = g.value(anchor).rows();
    let a = g.l2_normalize(anchor);
    let o = g.l2_normalize(other);
    let ot = g.transpose(o);
    let sims = g.matmul(a, ot)?;
    let logits = g.scale(sims, 1.0 / tau);
    let lse = g.masked_logsumexp(logits, Rc::new(vec![true; n * n]))?;
    let diag = g.mul(a, o)?;
    let diag = g.sum_cols(diag);
    let diag = g.scale(diag, 1.0 / tau);
    g.sub(lse, diag)
}

/// Mean over anchors of the temporal plus spatial alignment terms.
///
/// Returns `None` for batches with fewer than two staypoints, which have
/// no negatives.
pub fn align_loss(g: &mut Graph, dc: Var, ds: Var, dt: Var, tau: f64) -> Result<Option<Var>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "alignment temperature must be positive, got {tau}"
        )));
    }
    let n = g.value(dc).rows();
    if n < 2 {
        return Ok(None);
    }
    let lt = info_nce_rows(g, dc, dt, tau)?;
    let ls = info_nce_rows(g, dc, ds, tau)?;
    let both = g.add(lt, ls)?;
    Ok(Some(g.mean(both)))
}
