//! Sequence encoders from point embeddings to one vector per day.
//!
//! Batches are packed: the valid points of every trajectory are stacked
//! into one `[N, d]` matrix and [`Packed`] records where each trajectory
//! starts. Padding slots never materialize, which is how masking works for
//! all four architectures.

use std::fmt;
use std::ops::Range;
use std::rc::Rc;
use std::str::FromStr;

use crate::data::DEFAULT_CUTOFF_LEN;
use crate::error::{Error, Result};
use crate::modality::EMBED_DIM;
use crate::numerics::{seeded_rng, Graph, ParamId, ParamStore, SeededRng, Var};

pub const DEFAULT_LAYERS: usize = 4;
pub const ATTENTION_HEADS: usize = 4;
pub const FEED_FORWARD: usize = 256;
/// Prefix of every encoder parameter name.
pub const PREFIX: &str = "encoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Mlp,
    Rnn,
    Cnn,
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Mlp, Arch::Rnn, Arch::Cnn, Arch::Transformer];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Rnn => "rnn",
            Arch::Cnn => "cnn",
            Arch::Transformer => "transformer",
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "rnn" => Ok(Arch::Rnn),
            "cnn" => Ok(Arch::Cnn),
            "transformer" => Ok(Arch::Transformer),
            other => Err(Error::Config(format!("unknown encoder architecture `{other}`"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub layers: usize,
    pub dim: usize,
    pub cutoff_len: usize,
    /// Transformer feed-forward width.
    pub ff_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Cnn,
            layers: DEFAULT_LAYERS,
            dim: EMBED_DIM,
            cutoff_len: DEFAULT_CUTOFF_LEN,
            ff_dim: FEED_FORWARD,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.cutoff_len == 0 || self.ff_dim == 0 {
            return Err(Error::Config(
                "encoder layers, dim, cutoff_len and ff_dim must be at least 1".into(),
            ));
        }
        if self.arch == Arch::Transformer && !self.dim.is_multiple_of(ATTENTION_HEADS) {
            return Err(Error::Config(format!(
                "transformer width {} is not divisible by {ATTENTION_HEADS} heads",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Row layout of a packed batch of non-empty trajectories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    lens: Vec<usize>,
    offsets: Vec<usize>,
}

impl Packed {
    pub fn new(lens: Vec<usize>) -> Result<Self> {
        if lens.contains(&0) {
            return Err(Error::Data("packed batches hold non-empty trajectories only".into()));
        }
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        Ok(Self { lens, offsets })
    }

    pub fn n_seqs(&self) -> usize {
        self.lens.len()
    }

    pub fn n_rows(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.lens.last().unwrap())
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn range(&self, b: usize) -> Range<usize> {
        self.offsets[b]..self.offsets[b] + self.lens[b]
    }

    fn groups(&self) -> Rc<Vec<Vec<usize>>> {
        Rc::new((0..self.n_seqs()).map(|b| self.range(b).collect()).collect())
    }

    fn segments(&self) -> Rc<Vec<Range<usize>>> {
        Rc::new((0..self.n_seqs()).map(|b| self.range(b)).collect())
    }

    /// Slot position of every packed row.
    fn slots(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&l| 0..l).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn build(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            w: store.insert_glorot(format!("{name}.w"), fan_in, fan_out, rng),
            b: store.insert_zeros(format!("{name}.b"), &[1, fan_out]),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct RnnLayer {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn build(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), crate::numerics::Tensor::filled(&[1, dim], 1.0)),
            bias: store.insert_zeros(format!("{name}.bias"), &[1, dim]),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let n = g.mul_row(n, gain)?;
        g.add_row(n, bias)
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: Norm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    out: Linear,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
enum Layers {
    Mlp(Vec<Linear>),
    Rnn(Vec<RnnLayer>),
    Cnn(Vec<Linear>),
    Transformer { pos: ParamId, blocks: Vec<Block> },
}

/// A built encoder: parameter handles into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    layers: Layers,
}

impl Encoder {
    pub fn build(config: EncoderConfig, store: &mut ParamStore, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let name = |parts: &[&dyn fmt::Display]| {
            let mut s = PREFIX.to_string();
            for p in parts {
                s.push('.');
                s.push_str(&p.to_string());
            }
            s
        };
        let layers = match config.arch {
            Arch::Mlp => Layers::Mlp(
                (0..config.layers)
                    .map(|l| Linear::build(store, &name(&[&"mlp", &l]), d, d, rng))
                    .collect(),
            ),
            Arch::Cnn => Layers::Cnn(
                (0..config.layers)
                    .map(|l| Linear::build(store, &name(&[&"conv", &l]), 3 * d, d, rng))
                    .collect(),
            ),
            Arch::Rnn => Layers::Rnn(
                (0..config.layers)
                    .map(|l| {
                        let base = name(&[&"rnn", &l]);
                        RnnLayer {
                            w: store.insert_glorot(format!("{base}.w"), d, d, rng),
                            u: store.insert_glorot(format!("{base}.u"), d, d, rng),
                            b: store.insert_zeros(format!("{base}.b"), &[1, d]),
                        }
                    })
                    .collect(),
            ),
            Arch::Transformer => {
                let pos_data = (0..config.cutoff_len * d).map(|_| 0.02 * rng.normal()).collect();
                let pos = store.insert(
                    name(&[&"pos"]),
                    crate::numerics::Tensor::matrix(config.cutoff_len, d, pos_data)?,
                );
                let blocks = (0..config.layers)
                    .map(|l| {
                        let base = name(&[&"block", &l]);
                        Block {
                            norm1: Norm::build(store, &format!("{base}.norm1"), d),
                            wq: store.insert_glorot(format!("{base}.wq"), d, d, rng),
                            wk: store.insert_glorot(format!("{base}.wk"), d, d, rng),
                            wv: store.insert_glorot(format!("{base}.wv"), d, d, rng),
                            out: Linear::build(store, &format!("{base}.out"), d, d, rng),
                            norm2: Norm::build(store, &format!("{base}.norm2"), d),
                            ff1: Linear::build(store, &format!("{base}.ff1"), d, config.ff_dim, rng),
                            ff2: Linear::build(store, &format!("{base}.ff2"), config.ff_dim, d, rng),
                        }
                    })
                    .collect();
                Layers::Transformer { pos, blocks }
            }
        };
        Ok(Self { config, layers })
    }

    /// Pooled, unnormalized `[B, d]` output for the packed input `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, packed: &Packed) -> Result<Var> {
        let (rows, cols) = g.value(x).dims2();
        if rows != packed.n_rows() || cols != self.config.dim {
            return Err(Error::Shape {
                op: "encode",
                left: vec![rows, cols],
                right: vec![packed.n_rows(), self.config.dim],
            });
        }
        if let Some(&l) = packed.lens().iter().find(|&&l| l > self.config.cutoff_len) {
            return Err(Error::Data(format!(
                "trajectory of {l} points exceeds cutoff length {}",
                self.config.cutoff_len
            )));
        }
        match &self.layers {
            Layers::Mlp(layers) => {
                let mut h = x;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(g, store, h)?;
                    if i + 1 < layers.len() {
                        h = g.relu(h);
                    }
                }
                g.group_mean(h, packed.groups())
            }
            Layers::Cnn(layers) => {
                let (prev, next) = neighbor_index(packed);
                let mut h = x;
                for (i, layer) in layers.iter().enumerate() {
                    let p = g.gather_rows(h, prev.clone())?;
                    let n = g.gather_rows(h, next.clone())?;
                    let window = g.concat_cols(&[p, h, n])?;
                    h = layer.forward(g, store, window)?;
                    if i + 1 < layers.len() {
                        h = g.relu(h);
                    }
                }
                g.group_mean(h, packed.groups())
            }
            Layers::Rnn(layers) => rnn_forward(g, store, layers, x, packed),
            Layers::Transformer { pos, blocks } => {
                let slots = Rc::new(packed.slots().into_iter().map(Some).collect::<Vec<_>>());
                let table = g.param(store, *pos);
                let p = g.gather_rows(table, slots)?;
                let mut h = g.add(x, p)?;
                let segments = packed.segments();
                for b in blocks {
                    let a = b.norm1.forward(g, store, h)?;
                    let (wq, wk, wv) = (g.param(store, b.wq), g.param(store, b.wk), g.param(store, b.wv));
                    let q = g.matmul(a, wq)?;
                    let k = g.matmul(a, wk)?;
                    let v = g.matmul(a, wv)?;
                    let att = g.segment_attention(q, k, v, segments.clone(), ATTENTION_HEADS)?;
                    let att = b.out.forward(g, store, att)?;
                    h = g.add(h, att)?;
                    let f = b.norm2.forward(g, store, h)?;
                    let f = b.ff1.forward(g, store, f)?;
                    let f = g.relu(f);
                    let f = b.ff2.forward(g, store, f)?;
                    h = g.add(h, f)?;
                }
                g.group_mean(h, packed.groups())
            }
        }
    }

    /// Pooled and unit-normalized `[B, d]` embeddings.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var, packed: &Packed) -> Result<Var> {
        let pooled = self.forward(g, store, x, packed)?;
        Ok(g.l2_normalize(pooled))
    }
}

type Neighbors = Rc<Vec<Option<usize>>>;

/// Row index of each point's left and right neighbor inside its own
/// trajectory; `None` past either end gives the zero padding.
fn neighbor_index(packed: &Packed) -> (Neighbors, Neighbors) {
    let mut prev = Vec::with_capacity(packed.n_rows());
    let mut next = Vec::with_capacity(packed.n_rows());
    for b in 0..packed.n_seqs() {
        let r = packed.range(b);
        for i in r.clone() {
            prev.push((i > r.start).then(|| i - 1));
            next.push((i + 1 < r.end).then_some(i + 1));
        }
    }
    (Rc::new(prev), Rc::new(next))
}

/// Stacked `h_s = tanh(x_s W + h_{s-1} U + b)` over packed sequences; the
/// output is the last valid state of the top layer.
fn rnn_forward(g: &mut Graph, store: &ParamStore, layers: &[RnnLayer], x: Var, packed: &Packed) -> Result<Var> {
    let n = packed.n_seqs();
    // Longest first, so the sequences still running at step s are a prefix.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| packed.lens[b].cmp(&packed.lens[a]).then(a.cmp(&b)));
    let max_len = packed.lens[order[0]];
    let active: Vec<usize> = (0..max_len)
        .map(|s| order.iter().take_while(|&&b| packed.lens[b] > s).count())
        .collect();
    let mut inputs: Vec<Var> = Vec::with_capacity(max_len);
    for (s, &a) in active.iter().enumerate() {
        let idx: Vec<Option<usize>> = order[..a].iter().map(|&b| Some(packed.offsets[b] + s)).collect();
        inputs.push(g.gather_rows(x, Rc::new(idx))?);
    }
    for layer in layers {
        let (w, u, bias) = (
            g.param(store, layer.w),
            g.param(store, layer.u),
            g.param(store, layer.b),
        );
        let mut states: Vec<Var> = Vec::with_capacity(max_len);
        for (s, &xs) in inputs.iter().enumerate() {
            let mut pre = g.matmul(xs, w)?;
            if s > 0 {
                let prev = g.slice_rows(states[s - 1], 0..active[s])?;
                let rec = g.matmul(prev, u)?;
                pre = g.add(pre, rec)?;
            }
            let pre = g.add_row(pre, bias)?;
            states.push(g.tanh(pre));
        }
        inputs = states;
    }
    let all = g.concat_rows(&inputs)?;
    let mut step_offset = vec![0; max_len];
    for s in 1..max_len {
        step_offset[s] = step_offset[s - 1] + active[s - 1];
    }
    let mut rank = vec![0; n];
    for (r, &b) in order.iter().enumerate() {
        rank[b] = r;
    }
    let idx: Vec<Option<usize>> = (0..n)
        .map(|b| Some(step_offset[packed.lens[b] - 1] + rank[b]))
        .collect();
    g.gather_rows(all, Rc::new(idx))
}

/// Names and shapes of every encoder tensor, in creation order.
pub fn parameter_manifest(config: &EncoderConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let mut store = ParamStore::new();
    Encoder::build(*config, &mut store, &mut seeded_rng(config.seed, 0))?;
    Ok(store.manifest())
}
