use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{normalized, seeded_rng, stream_id_of, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderMode {
    SeededTable,
    ExternalFile,
}

impl EmbedderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedderMode::SeededTable => "seeded-table",
            EmbedderMode::ExternalFile => "external-file",
        }
    }
}

/// Frozen category embeddings. Every vector is unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedder {
    dim: usize,
    seed: u64,
    external: Option<BTreeMap<String, Vec<f64>>>,
}

impl SemanticEmbedder {
    /// Gaussian vectors drawn from a per-category RNG stream.
    pub fn seeded(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            external: None,
        }
    }

    /// Precomputed vectors; rows are normalized on load.
    pub fn external(dim: usize, table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (cat, v) in table {
            if v.len() != dim {
                return Err(Error::Data(format!(
                    "embedding for `{cat}` has {} values, expected {dim}",
                    v.len()
                )));
            }
            let unit = normalized(&v, f64::MIN_POSITIVE)
                .ok_or_else(|| Error::Data(format!("embedding for `{cat}` is zero")))?;
            out.insert(cat, unit);
        }
        Ok(Self {
            dim,
            seed: 0,
            external: Some(out),
        })
    }

    pub fn load_external(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::external(dim, parse_external(&text, &path.display().to_string(), dim)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> EmbedderMode {
        if self.external.is_some() {
            EmbedderMode::ExternalFile
        } else {
            EmbedderMode::SeededTable
        }
    }

    /// The normalized table in external mode.
    pub fn external_table(&self) -> Option<&BTreeMap<String, Vec<f64>>> {
        self.external.as_ref()
    }

    pub fn embed(&self, category: &str) -> Result<Vec<f64>> {
        if category.is_empty() {
            return Err(Error::Data("empty category".into()));
        }
        match &self.external {
            Some(table) => table
                .get(category)
                .cloned()
                .ok_or_else(|| Error::MissingCategory(vec![category.to_string()])),
            None => {
                let mut rng = seeded_rng(self.seed, stream_id_of(&["semantic", category]));
                loop {
                    let v: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
                    if let Some(u) = normalized(&v, 1e-12) {
                        return Ok(u);
                    }
                }
            }
        }
    }

    /// Fails with every missing category at once.
    pub fn check_coverage<'a>(&self, categories: impl IntoIterator<Item = &'a String>) -> Result<()> {
        let Some(table) = &self.external else { return Ok(()) };
        let missing: BTreeSet<String> = categories
            .into_iter()
            .filter(|c| !table.contains_key(*c))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingCategory(missing.into_iter().collect()))
        }
    }

    /// `[n, d]` table for the given categories.
    pub fn table<'a>(&self, categories: impl IntoIterator<Item = &'a str>) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut n = 0;
        for c in categories {
            data.extend(self.embed(c)?);
            n += 1;
        }
        Tensor::matrix(n, self.dim, data)
    }
}

/// Lines of `category v_1 ... v_d`; the category is everything before the
/// last `d` fields, so it may contain spaces.
pub fn parse_external(text: &str, file: &str, dim: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < dim + 1 {
            return Err(Error::parse(
                file,
                i + 1,
                format!("expected a category and {dim} values"),
            ));
        }
        let split = fields.len() - dim;
        let values = fields[split..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::parse(file, i + 1, e.to_string()))?;
        out.insert(fields[..split].join(" "), values);
    }
    Ok(out)
}

pub fn render_external(table: &BTreeMap<String, Vec<f64>>) -> String {
    let mut out = String::new();
    for (cat, v) in table {
        out.push_str(cat);
        for x in v {
            out.push(' ');
            out.push_str(&format!("{x:?}"));
        }
        out.push('\n');
    }
    out
}
