//! The full day encoder: frozen category table, modality mappers, fusion,
//! sequence encoder, empty-day vector and centroid bank in one store.

use std::collections::BTreeMap;
use std::rc::Rc;

use rayon::prelude::*;

use crate::config::Config;
use crate::data::{DailyTrajectory, Dataset, DatasetHeader};
use crate::encoder::{Arch, Encoder, EncoderConfig, Packed};
use crate::error::{Error, Result};
use crate::modality::{Ablation, EmbedderMode, Modality, PointBatch, SemanticEmbedder};
use crate::numerics::{seeded_rng, stream_id, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

pub const EMPTY_NAME: &str = "model.empty";
pub const CENTROIDS_NAME: &str = "model.centroids";
const TABLE_NAME: &str = "embedder.table";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ablation: Ablation,
    pub centroids: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            ablation: Ablation::NONE,
            centroids: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.centroids == 0 {
            return Err(Error::Config("train.centroids must be at least 1".into()));
        }
        Ok(())
    }
}

/// Day embeddings of every user, indexed by day.
pub type DayEmbeddings = BTreeMap<String, Vec<Vec<f64>>>;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub embedder: SemanticEmbedder,
    pub modality: Modality,
    pub encoder: Encoder,
    pub store: ParamStore,
    empty: ParamId,
    centroids: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig, embedder: SemanticEmbedder) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.dim;
        if embedder.dim() != d {
            return Err(Error::Config(format!(
                "embedding table width {} differs from model width {d}",
                embedder.dim()
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(config.encoder.seed, stream_id("init"));
        let modality = Modality::build(&mut store, d, &mut rng);
        let encoder = Encoder::build(config.encoder, &mut store, &mut rng)?;
        let empty_init = (0..d).map(|_| rng.normal()).collect();
        let empty = store.insert(EMPTY_NAME, Tensor::row(empty_init));
        let centroids = store.insert_zeros(CENTROIDS_NAME, &[config.centroids, d]);
        Ok(Self {
            config,
            embedder,
            modality,
            encoder,
            store,
            empty,
            centroids,
        })
    }

    /// Fresh model for a resolved configuration, loading the external
    /// embedding table when one is configured.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let mc = cfg.model()?;
        let dim = mc.encoder.dim;
        let embedder = match cfg.embeddings_path() {
            Some(path) => SemanticEmbedder::load_external(&path, dim)?,
            None => SemanticEmbedder::seeded(dim, cfg.seed()?),
        };
        Self::new(mc, embedder)
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.dim
    }

    pub fn centroid_id(&self) -> ParamId {
        self.centroids
    }

    pub fn centroids(&self) -> &Tensor {
        self.store.get(self.centroids)
    }

    pub fn set_centroids(&mut self, value: Tensor) -> Result<()> {
        let cur = self.store.get(self.centroids);
        if cur.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_centroids",
                left: cur.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *self.store.get_mut(self.centroids) = value;
        Ok(())
    }

    /// Raw per-point inputs for the given days, stacked in order.
    pub fn point_batch<'a>(
        &self,
        days: impl IntoIterator<Item = &'a DailyTrajectory>,
        header: &DatasetHeader,
    ) -> Result<PointBatch> {
        PointBatch::build(days.into_iter().flat_map(|d| d.points.iter()), header, &self.embedder)
    }

    /// Fusion inputs `[n, 3d]` computed with the current mappers.
    pub fn fusion_values(&self, batch: &PointBatch) -> Result<Tensor> {
        self.modality
            .fusion_input_values(&self.store, batch, self.config.ablation)
    }

    /// Unit-norm day embeddings `[lens.len(), d]` from stacked fusion
    /// inputs. Days with length zero get the learned empty-day vector;
    /// `x` holds the rows of the non-empty days only and may be `None` if
    /// all days are empty.
    pub fn encode_fused(&self, g: &mut Graph, store: &ParamStore, x: Option<Var>, lens: &[usize]) -> Result<Var> {
        let nonempty: Vec<usize> = lens.iter().copied().filter(|&l| l > 0).collect();
        let mut parts = Vec::new();
        if let Some(x) = x {
            if nonempty.is_empty() {
                return Err(Error::Data("point rows given for a batch of empty days".into()));
            }
            let p = self.modality.fuse(g, store, x)?;
            let packed = Packed::new(nonempty.clone())?;
            parts.push(self.encoder.encode(g, store, p, &packed)?);
        } else if !nonempty.is_empty() {
            return Err(Error::Data("non-empty days given without point rows".into()));
        }
        let n_full = nonempty.len();
        if n_full < lens.len() {
            let e = g.param(store, self.empty);
            parts.push(g.l2_normalize(e));
        }
        let all = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let mut next = 0;
        let index: Vec<Option<usize>> = lens
            .iter()
            .map(|&l| {
                if l > 0 {
                    next += 1;
                    Some(next - 1)
                } else {
                    Some(n_full)
                }
            })
            .collect();
        g.gather_rows(all, Rc::new(index))
    }

    /// Day embeddings for a list of days, without gradients.
    pub fn embed(&self, days: &[&DailyTrajectory], header: &DatasetHeader) -> Result<Vec<Vec<f64>>> {
        let lens: Vec<usize> = days.iter().map(|d| d.points.len()).collect();
        let batch = self.point_batch(days.iter().copied(), header)?;
        let mut g = Graph::new();
        let x = if batch.is_empty() {
            None
        } else {
            let parts = self.modality.modalities(&mut g, &self.store, &batch)?;
            Some(self.modality.fusion_input(&mut g, parts, self.config.ablation)?)
        };
        let z = self.encode_fused(&mut g, &self.store, x, &lens)?;
        let z = g.value(z);
        Ok((0..days.len()).map(|i| z.row_slice(i).to_vec()).collect())
    }

    /// Every day of every user. Users are processed in parallel and the
    /// result is keyed by user, so the output does not depend on the
    /// thread count.
    pub fn embed_days(&self, ds: &Dataset) -> Result<DayEmbeddings> {
        self.embedder.check_coverage(&ds.vocabulary)?;
        let users: Vec<&String> = ds.daily.keys().collect();
        let rows: Vec<Result<(String, Vec<Vec<f64>>)>> = users
            .par_iter()
            .map(|u| {
                let days: Vec<&DailyTrajectory> = ds.daily[*u].iter().collect();
                Ok(((*u).clone(), self.embed(&days, &ds.header)?))
            })
            .collect();
        rows.into_iter().collect()
    }

    pub fn to_checkpoint(&self, mut meta: BTreeMap<String, String>) -> Checkpoint {
        let e = &self.config.encoder;
        for (k, v) in [
            ("model.arch", e.arch.to_string()),
            ("model.layers", e.layers.to_string()),
            ("model.dim", e.dim.to_string()),
            ("model.cutoff_len", e.cutoff_len.to_string()),
            ("model.ff_dim", e.ff_dim.to_string()),
            ("model.seed", e.seed.to_string()),
            ("model.ablation", self.config.ablation.name().to_string()),
            ("model.centroids", self.config.centroids.to_string()),
            ("embedder.mode", self.embedder.mode().as_str().to_string()),
            ("embedder.seed", self.embedder.seed().to_string()),
        ] {
            meta.insert(k.to_string(), v);
        }
        let mut ck = Checkpoint::from_params(&self.store, meta);
        if let Some(table) = self.embedder.external_table() {
            let cats: Vec<&String> = table.keys().collect();
            ck.meta.insert(
                "embedder.categories".into(),
                serde_json::to_string(&cats).expect("category list serializes"),
            );
            let data = table.values().flatten().copied().collect();
            ck.tensors.push((
                TABLE_NAME.to_string(),
                Tensor::matrix(table.len(), self.dim(), data).expect("table shape"),
            ));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| -> Result<&str> {
            ck.meta
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata `{k}`")))
        };
        let ablation = match meta("model.ablation")? {
            "custom" => return Err(Error::Checkpoint("custom ablations cannot be restored".into())),
            name => Ablation::parse(name)?,
        };
        let config = ModelConfig {
            encoder: EncoderConfig {
                arch: meta("model.arch")?.parse::<Arch>()?,
                layers: num("model.layers")? as usize,
                dim: num("model.dim")? as usize,
                cutoff_len: num("model.cutoff_len")? as usize,
                ff_dim: num("model.ff_dim")? as usize,
                seed: num("model.seed")?,
            },
            ablation,
            centroids: num("model.centroids")? as usize,
        };
        let dim = config.encoder.dim;
        let embedder = match meta("embedder.mode")? {
            m if m == EmbedderMode::SeededTable.as_str() => SemanticEmbedder::seeded(dim, num("embedder.seed")?),
            m if m == EmbedderMode::ExternalFile.as_str() => {
                let cats: Vec<String> = serde_json::from_str(meta("embedder.categories")?)
                    .map_err(|e| Error::Checkpoint(format!("bad category list: {e}")))?;
                let t = ck
                    .tensor(TABLE_NAME)
                    .ok_or_else(|| Error::Checkpoint("external embedding table missing".into()))?;
                if t.shape() != [cats.len(), dim] {
                    return Err(Error::Checkpoint("external embedding table has the wrong shape".into()));
                }
                let table = cats
                    .into_iter()
                    .enumerate()
                    .map(|(i, c)| (c, t.row_slice(i).to_vec()))
                    .collect();
                SemanticEmbedder::external(dim, table)?
            }
            other => return Err(Error::Checkpoint(format!("unknown embedder mode `{other}`"))),
        };
        let mut model = Model::new(config, embedder)?;
        let expected = model.store.manifest();
        let stored: Vec<(String, Vec<usize>)> = ck
            .tensors
            .iter()
            .filter(|(n, _)| n != TABLE_NAME)
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if stored != expected {
            return Err(Error::Checkpoint(
                "parameter manifest does not match the recorded architecture".into(),
            ));
        }
        for (name, t) in &ck.tensors {
            if name != TABLE_NAME {
                let id = model.store.id(name)?;
                *model.store.get_mut(id) = t.clone();
            }
        }
        Ok(model)
    }
}
