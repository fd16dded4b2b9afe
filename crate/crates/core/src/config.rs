//! Flat `key = value` configuration with dotted sections.
//!
//! Every key has a documented default except `seed`, which must be given
//! either in the file or as an override. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoder::{Arch, EncoderConfig};
use crate::error::{Error, Result};
use crate::modality::Ablation;
use crate::model::ModelConfig;
use crate::objective::{ClusteringMode, TrainConfig};
use crate::polsim::{outlier_counts, SimConfig};
use crate::scoring::{PopulationMode, ScoreConfig};

/// One recognised key.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    /// Empty means "required".
    pub default: &'static str,
    pub doc: &'static str,
}

pub const KEYS: &[KeySpec] = &[
    KeySpec {
        key: "seed",
        default: "",
        doc: "master seed for simulation, initialization and sampling (required)",
    },
    KeySpec {
        key: "sim.agents",
        default: "200",
        doc: "number of simulated agents",
    },
    KeySpec {
        key: "sim.normal_days",
        default: "63",
        doc: "days before outlier onset; the first test day",
    },
    KeySpec {
        key: "sim.outlier_days",
        default: "14",
        doc: "days after outlier onset",
    },
    KeySpec {
        key: "sim.hunger_outliers",
        default: "12",
        doc: "hunger outliers, split evenly over red/orange/yellow",
    },
    KeySpec {
        key: "sim.work_outliers",
        default: "4",
        doc: "work outliers, split evenly over red/orange/yellow",
    },
    KeySpec {
        key: "sim.social_outliers",
        default: "4",
        doc: "social outliers, split evenly over red/orange/yellow",
    },
    KeySpec {
        key: "sim.homes",
        default: "120",
        doc: "Home POIs on the map",
    },
    KeySpec {
        key: "sim.workplaces",
        default: "30",
        doc: "Workplace POIs on the map",
    },
    KeySpec {
        key: "sim.restaurants",
        default: "40",
        doc: "Restaurant POIs on the map",
    },
    KeySpec {
        key: "sim.recreation",
        default: "25",
        doc: "Recreation POIs on the map",
    },
    KeySpec {
        key: "sim.pubs",
        default: "15",
        doc: "Pub POIs on the map",
    },
    KeySpec {
        key: "sim.favorites",
        default: "3",
        doc: "favorite evening venues per agent",
    },
    KeySpec {
        key: "sim.hunger_min_hours",
        default: "5",
        doc: "shortest per-agent hunger period",
    },
    KeySpec {
        key: "sim.hunger_max_hours",
        default: "6.5",
        doc: "longest per-agent hunger period",
    },
    KeySpec {
        key: "sim.hunger_factor",
        default: "3",
        doc: "hunger outliers divide their period by this on abnormal days",
    },
    KeySpec {
        key: "sim.evening_prob",
        default: "0.5",
        doc: "chance of an evening out on any day",
    },
    KeySpec {
        key: "sim.epoch",
        default: "1704067200",
        doc: "epoch seconds of day 0",
    },
    KeySpec {
        key: "sim.epoch_weekday",
        default: "0",
        doc: "weekday of day 0, 0 = Monday",
    },
    KeySpec {
        key: "model.arch",
        default: "cnn",
        doc: "sequence encoder: mlp, rnn, cnn or transformer",
    },
    KeySpec {
        key: "model.layers",
        default: "4",
        doc: "encoder layers",
    },
    KeySpec {
        key: "model.dim",
        default: "64",
        doc: "embedding width",
    },
    KeySpec {
        key: "model.cutoff_len",
        default: "16",
        doc: "staypoints kept per day",
    },
    KeySpec {
        key: "model.ff_dim",
        default: "256",
        doc: "transformer feed-forward width",
    },
    KeySpec {
        key: "model.ablation",
        default: "none",
        doc: "none, no-semantic, no-spatial or no-temporal",
    },
    KeySpec {
        key: "model.embeddings",
        default: "seeded",
        doc: "`seeded` for the seeded category table, else a path to an external embedding file",
    },
    KeySpec {
        key: "train.epochs",
        default: "200",
        doc: "total training epochs",
    },
    KeySpec {
        key: "train.align_epochs",
        default: "auto",
        doc: "alignment epochs before the encoder phase; auto = epochs/4",
    },
    KeySpec {
        key: "train.batch",
        default: "128",
        doc: "trajectories (or staypoints during alignment) per batch",
    },
    KeySpec {
        key: "train.temperature",
        default: "0.1",
        doc: "consistency loss temperature",
    },
    KeySpec {
        key: "train.beta",
        default: "0.1",
        doc: "weight of the clustering loss",
    },
    KeySpec {
        key: "train.centroids",
        default: "10",
        doc: "number of centroids K",
    },
    KeySpec {
        key: "train.pattern_freq",
        default: "7",
        doc: "day-pattern frequency f",
    },
    KeySpec {
        key: "train.negatives",
        default: "16",
        doc: "negatives per anchor",
    },
    KeySpec {
        key: "train.max_positives",
        default: "4",
        doc: "positives per anchor",
    },
    KeySpec {
        key: "train.align_temperature",
        default: "0.1",
        doc: "alignment loss temperature",
    },
    KeySpec {
        key: "train.clustering",
        default: "softmin",
        doc: "centroid weighting: softmin, or paper for distance-proportional weights",
    },
    KeySpec {
        key: "train.clustering_temperature",
        default: "0.1",
        doc: "softmin temperature",
    },
    KeySpec {
        key: "train.joint",
        default: "false",
        doc: "train alignment jointly with the encoder instead of in two phases",
    },
    KeySpec {
        key: "train.align_weight",
        default: "1",
        doc: "alignment weight in joint training",
    },
    KeySpec {
        key: "score.mode",
        default: "closest",
        doc: "cross-population centroid rule: closest, or paper-eq11 for the farthest centroid",
    },
    KeySpec {
        key: "score.time_weight",
        default: "0.5",
        doc: "weight of cross-time in the fused score; cross-population gets the rest",
    },
    KeySpec {
        key: "score.split_day",
        default: "auto",
        doc: "first scored test day; auto = dataset split day",
    },
    KeySpec {
        key: "eval.top_k",
        default: "10,100",
        doc: "Top-K cutoffs; Top-ceil(0.1 |users|) is always added",
    },
];

fn key_spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

/// Text listing every key with its default, for `--help`.
pub fn key_help() -> String {
    let mut out = String::from("configuration keys (key = default):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "<required>" } else { k.default };
        out.push_str(&format!("  {} = {}\n      {}\n", k.key, default, k.doc));
    }
    out
}

/// Resolved configuration: every key has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parse file text, then apply `overrides` in order.
    pub fn parse(text: &str, file: &str, overrides: &[(&str, String)]) -> Result<Self> {
        let mut given = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(file, i + 1, "expected `key = value`"));
            };
            let k = k.trim();
            if key_spec(k).is_none() {
                return Err(Error::Config(format!("{file}:{}: unknown key `{k}`", i + 1)));
            }
            given.insert(k.to_string(), v.trim().to_string());
        }
        Self::resolve(given, overrides)
    }

    pub fn load(path: &Path, overrides: &[(&str, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), overrides)
    }

    /// Defaults plus overrides; `seed` must be among the overrides.
    pub fn from_overrides(overrides: &[(&str, String)]) -> Result<Self> {
        Self::resolve(BTreeMap::new(), overrides)
    }

    fn resolve(mut given: BTreeMap<String, String>, overrides: &[(&str, String)]) -> Result<Self> {
        for (k, v) in overrides {
            if key_spec(k).is_none() {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            given.insert(k.to_string(), v.clone());
        }
        let mut values = BTreeMap::new();
        for k in KEYS {
            let v = match given.remove(k.key) {
                Some(v) => v,
                None if k.default.is_empty() => {
                    return Err(Error::Config(format!("missing required key `{}`", k.key)));
                }
                None => k.default.to_string(),
            };
            values.insert(k.key.to_string(), v);
        }
        let cfg = Self { values };
        // Surface type errors at load time rather than at first use.
        cfg.sim()?;
        cfg.model()?;
        cfg.train()?;
        cfg.score()?;
        cfg.top_k()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("invalid value `{}` for `{key}`", self.get(key))))
    }

    /// Canonical text: one `key = value` line per key, sorted.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of [`Config::render`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.typed("seed")
    }

    pub fn sim(&self) -> Result<SimConfig> {
        let cfg = SimConfig {
            n_agents: self.typed("sim.agents")?,
            n_normal_days: self.typed("sim.normal_days")?,
            n_outlier_days: self.typed("sim.outlier_days")?,
            outliers: outlier_counts(
                self.typed("sim.hunger_outliers")?,
                self.typed("sim.work_outliers")?,
                self.typed("sim.social_outliers")?,
            ),
            n_homes: self.typed("sim.homes")?,
            n_workplaces: self.typed("sim.workplaces")?,
            n_restaurants: self.typed("sim.restaurants")?,
            n_recreation: self.typed("sim.recreation")?,
            n_pubs: self.typed("sim.pubs")?,
            n_favorites: self.typed("sim.favorites")?,
            hunger_hours: (self.typed("sim.hunger_min_hours")?, self.typed("sim.hunger_max_hours")?),
            hunger_factor: self.typed("sim.hunger_factor")?,
            evening_prob: self.typed("sim.evening_prob")?,
            epoch: self.typed("sim.epoch")?,
            epoch_weekday: self.typed("sim.epoch_weekday")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                arch: self.get("model.arch").parse::<Arch>()?,
                layers: self.typed("model.layers")?,
                dim: self.typed("model.dim")?,
                cutoff_len: self.typed("model.cutoff_len")?,
                ff_dim: self.typed("model.ff_dim")?,
                seed: self.seed()?,
            },
            ablation: Ablation::parse(self.get("model.ablation"))?,
            centroids: self.typed("train.centroids")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// External embedding file, if one is configured.
    pub fn embeddings_path(&self) -> Option<PathBuf> {
        match self.get("model.embeddings") {
            "seeded" => None,
            p => Some(PathBuf::from(p)),
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let epochs: usize = self.typed("train.epochs")?;
        let align_epochs = match self.get("train.align_epochs") {
            "auto" => epochs / 4,
            _ => self.typed("train.align_epochs")?,
        };
        let cfg = TrainConfig {
            epochs,
            align_epochs,
            batch: self.typed("train.batch")?,
            temperature: self.typed("train.temperature")?,
            beta: self.typed("train.beta")?,
            centroids: self.typed("train.centroids")?,
            pattern_freq: self.typed("train.pattern_freq")?,
            negatives: self.typed("train.negatives")?,
            max_positives: self.typed("train.max_positives")?,
            align_temperature: self.typed("train.align_temperature")?,
            clustering: self.get("train.clustering").parse::<ClusteringMode>()?,
            clustering_temperature: self.typed("train.clustering_temperature")?,
            joint: self.typed("train.joint")?,
            align_weight: self.typed("train.align_weight")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn score(&self) -> Result<ScoreConfig> {
        let split_day = match self.get("score.split_day") {
            "auto" => None,
            _ => Some(self.typed("score.split_day")?),
        };
        let cfg = ScoreConfig {
            mode: self.get("score.mode").parse::<PopulationMode>()?,
            time_weight: self.typed("score.time_weight")?,
            split_day,
            pattern_freq: self.typed("train.pattern_freq")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn top_k(&self) -> Result<Vec<usize>> {
        self.get("eval.top_k")
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("invalid value `{s}` in `eval.top_k`")))
            })
            .collect()
    }
}

/// Lines `# key = value` for embedding a config into other outputs, led by
/// the hash.
pub fn provenance_lines(cfg: &Config) -> String {
    let mut out = format!("# config_hash = {}\n", cfg.hash());
    for line in cfg.render().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(seed: u64) -> Vec<(&'static str, String)> {
        vec![("seed", seed.to_string())]
    }

    #[test]
    fn defaults_resolve() {
        let cfg = Config::from_overrides(&seeded(1)).unwrap();
        assert_eq!(cfg.sim().unwrap(), SimConfig::default());
        let t = cfg.train().unwrap();
        assert_eq!((t.epochs, t.align_epochs, t.batch, t.centroids), (200, 50, 128, 10));
        assert_eq!(cfg.model().unwrap().encoder.arch, Arch::Cnn);
        assert_eq!(cfg.top_k().unwrap(), vec![10, 100]);
    }

    #[test]
    fn seed_is_required() {
        let err = Config::parse("sim.agents = 10\n", "c", &[]).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let cfg = Config::parse("sim.agents = 60\n", "c", &seeded(3)).unwrap();
        assert_eq!(cfg.sim().unwrap().n_agents, 60);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = Config::parse("seed = 1\nsim.agnets = 5\n", "c", &[]).unwrap_err();
        assert!(err.to_string().contains("sim.agnets"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "seed = x",
            "seed = 1\nmodel.arch = lstm",
            "seed = 1\nsim.homes = 0",
            "seed = 1\ntrain.clustering = hard",
        ] {
            assert!(Config::parse(text, "c", &[]).is_err(), "{text}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::parse("# comment\nseed = 1\n", "c", &[]).unwrap();
        let b = Config::parse("seed=1", "c", &[]).unwrap();
        let c = Config::parse("seed = 2", "c", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
        let over = Config::parse("seed = 1", "c", &seeded(2)).unwrap();
        assert_eq!(over.hash(), c.hash());
    }

    #[test]
    fn help_lists_every_key() {
        let help = key_help();
        for k in KEYS {
            assert!(help.contains(k.key));
        }
    }
}
