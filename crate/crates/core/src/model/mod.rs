//! Decoder-only transformer with an encoding / thinking / decoding split.
//!
//! Blocks are pre-norm (RMS norm), use rotary position encoding inside
//! causal multi-head attention and a SiLU MLP. Embedding and LM head are
//! separate matrices. Any contiguous layer range can be run on its own,
//! optionally reading and writing a shared [`KvCache`].

mod cache;
pub mod checkpoint;
mod config;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use cache::{KvCache, OccupancySummary};
pub use config::{LayerPartition, ModelConfig, Stage};

use crate::error::{Error, Result};
use crate::tensor::{AttnLayout, Graph, NodeId, Real, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct LayerWeights {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    mlp_norm: usize,
    w_up: usize,
    w_down: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    embedding: usize,
    final_norm: usize,
    lm_head: usize,
    layers: Vec<LayerWeights>,
}

/// Parameter nodes of a model bound into one graph.
pub(crate) struct Bound(pub(crate) Vec<NodeId>);

/// Rows of a batch: absolute position per row and the row ranges that form
/// independent causal sequences.
#[derive(Clone, Debug)]
pub(crate) struct Rows {
    pub positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

impl Rows {
    pub fn single(positions: &[usize]) -> Self {
        Rows {
            positions: positions.to_vec(),
            segments: vec![0..positions.len()],
        }
    }

    pub fn batched(batch: usize, len: usize) -> Self {
        let l = AttnLayout::<f32>::batched(batch, len);
        Rows {
            positions: l.positions,
            segments: l.segments,
        }
    }
}

/// Parameter names in checkpoint order.
pub fn parameter_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for l in 0..config.n_layers {
        for part in ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"] {
            names.push(format!("layers.{l}.{part}"));
        }
    }
    names.push("final_norm".into());
    names.push("lm_head".into());
    names
}

fn parameter_shape(config: &ModelConfig, name: &str) -> Vec<usize> {
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    match name.rsplit('.').next().unwrap_or(name) {
        "embedding" => vec![v, d],
        "lm_head" => vec![d, v],
        "attn_norm" | "mlp_norm" | "final_norm" => vec![d],
        "w_up" => vec![d, f],
        "w_down" => vec![f, d],
        _ => vec![d, d],
    }
}

impl<T: Real> Model<T> {
    /// Seeded scaled-normal initialisation. Norm gains start at one; the
    /// residual output projections are scaled down by `sqrt(2L)`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let names = parameter_names(config);
        let mut params = Vec::with_capacity(names.len());
        for name in &names {
            let shape = parameter_shape(config, name);
            let n: usize = shape.iter().product();
            let data: Vec<T> = if shape.len() == 1 {
                vec![T::one(); n]
            } else {
                let std = if name.ends_with(".wo") || name.ends_with(".w_down") {
                    residual_std
                } else {
                    INIT_STD
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            };
            params.push(Tensor::new(shape, data)?.with_grad());
        }
        Self::assemble(config.clone(), params)
    }

    /// Builds a model from tensors listed in [`parameter_names`] order.
    pub fn from_parameters(config: &ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let names = parameter_names(config);
        if params.len() != names.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                names.len(),
                params.len()
            )));
        }
        for (name, p) in names.iter().zip(&params) {
            let want = parameter_shape(config, name);
            if p.shape() != want.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {want:?}",
                    p.shape()
                )));
            }
        }
        let params = params.into_iter().map(Tensor::with_grad).collect();
        Self::assemble(config.clone(), params)
    }

    fn assemble(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let names = parameter_names(&config);
        let layers = (0..config.n_layers)
            .map(|l| {
                let b = 1 + 8 * l;
                LayerWeights {
                    attn_norm: b,
                    wq: b + 1,
                    wk: b + 2,
                    wv: b + 3,
                    wo: b + 4,
                    mlp_norm: b + 5,
                    w_up: b + 6,
                    w_down: b + 7,
                }
            })
            .collect();
        let n = names.len();
        Ok(Model {
            config,
            params,
            names,
            embedding: 0,
            final_norm: n - 2,
            lm_head: n - 1,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn partition(&self) -> LayerPartition {
        self.config.partition()
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    /// Weight decay applies to matrices only.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.shape().len() == 2).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            embedding: self.embedding,
            final_norm: self.final_norm,
            lm_head: self.lm_head,
            layers: self.layers.clone(),
        }
    }

    pub(crate) fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.params.iter().map(|p| g.leaf(p)).collect())
    }

    pub(crate) fn embed_node(&self, g: &mut Graph<T>, b: &Bound, tokens: &[usize]) -> Result<NodeId> {
        g.gather(b.0[self.embedding], tokens)
    }

    pub(crate) fn head_node(&self, g: &mut Graph<T>, b: &Bound, x: NodeId) -> Result<NodeId> {
        let h = g.rms_norm(x, b.0[self.final_norm], self.config.norm_eps)?;
        g.matmul(h, b.0[self.lm_head])
    }

    /// Runs layers `range` in order over `x`.
    ///
    /// With a cache, every key position at or below a row's position that is
    /// not one of the in-flight rows is read from the cache and must be
    /// `Filled`. With `write_cache`, the in-flight keys/values are stored and
    /// their slots become `Filled`.
    pub(crate) fn layers_node(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        mut x: NodeId,
        range: Range<usize>,
        rows: &Rows,
        mut cache: Option<&mut KvCache<T>>,
        write_cache: bool,
    ) -> Result<NodeId> {
        if range.end > self.config.n_layers {
            return Err(Error::Index {
                what: "layer",
                index: range.end,
                limit: self.config.n_layers,
            });
        }
        let cached_positions = match &cache {
            Some(_) => Some(cache_prefix_positions(rows)?),
            None => None,
        };
        let c = &self.config;
        for layer in range {
            let w = self.layers[layer];
            let h = g.rms_norm(x, b.0[w.attn_norm], c.norm_eps)?;
            let q = g.matmul(h, b.0[w.wq])?;
            let k = g.matmul(h, b.0[w.wk])?;
            let v = g.matmul(h, b.0[w.wv])?;
            let q = g.rope(q, &rows.positions, c.n_heads, c.rope_base)?;
            let k = g.rope(k, &rows.positions, c.n_heads, c.rope_base)?;
            let prefix = match (&mut cache, &cached_positions) {
                (Some(cache), Some(pos)) => {
                    let prefix = cache.prefix(layer, pos.clone())?;
                    if write_cache {
                        let d = c.d_model;
                        let (ks, vs) = (g.value(k), g.value(v));
                        for (r, &p) in rows.positions.iter().enumerate() {
                            cache.write(layer, p, &ks[r * d..(r + 1) * d], &vs[r * d..(r + 1) * d])?;
                        }
                    }
                    Some(prefix)
                }
                _ => None,
            };
            let layout = AttnLayout {
                positions: rows.positions.clone(),
                segments: rows.segments.clone(),
                prefix,
            };
            let a = g.attention(q, k, v, c.n_heads, layout)?;
            let a = g.matmul(a, b.0[w.wo])?;
            x = g.add(x, a)?;
            let h = g.rms_norm(x, b.0[w.mlp_norm], c.norm_eps)?;
            let u = g.matmul(h, b.0[w.w_up])?;
            let u = g.silu(u);
            let dn = g.matmul(u, b.0[w.w_down])?;
            x = g.add(x, dn)?;
        }
        Ok(x)
    }

    /// Embedding rows for `tokens`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let b = self.bind(&mut g);
        let x = self.embed_node(&mut g, &b, tokens)?;
        Ok(g.tensor(x))
    }

    /// Applies layers `layers` to `states` (one row per entry of
    /// `positions`) against a shared cache. An empty range returns the
    /// states unchanged.
    pub fn forward_range(
        &self,
        states: &Tensor<T>,
        layers: Range<usize>,
        positions: &[usize],
        cache: &mut KvCache<T>,
        write_cache: bool,
    ) -> Result<Tensor<T>> {
        self.run_range(states, layers, positions, Some(cache), write_cache)
    }

    /// As [`Model::forward_range`] for a complete sequence with no cache.
    pub fn forward_range_uncached(
        &self,
        states: &Tensor<T>,
        layers: Range<usize>,
        positions: &[usize],
    ) -> Result<Tensor<T>> {
        self.run_range(states, layers, positions, None, false)
    }

    fn run_range(
        &self,
        states: &Tensor<T>,
        layers: Range<usize>,
        positions: &[usize],
        cache: Option<&mut KvCache<T>>,
        write_cache: bool,
    ) -> Result<Tensor<T>> {
        let (rows, d) = states.dims2()?;
        if d != self.config.d_model || rows != positions.len() {
            return Err(Error::dim(format!(
                "states {rows}x{d} with {} positions for d_model {}",
                positions.len(),
                self.config.d_model
            )));
        }
        if layers.is_empty() {
            return Ok(states.clone());
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_seq_len) {
            return Err(Error::Index {
                what: "position",
                index: p,
                limit: self.config.max_seq_len,
            });
        }
        let mut g = Graph::inference();
        let b = self.bind(&mut g);
        let x = g.leaf(states);
        let out = self.layers_node(&mut g, &b, x, layers, &Rows::single(positions), cache, write_cache)?;
        Ok(g.tensor(out))
    }

    /// Final norm followed by the output projection.
    pub fn lm_head(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let b = self.bind(&mut g);
        let x = g.leaf(states);
        let z = self.head_node(&mut g, &b, x)?;
        Ok(g.tensor(z))
    }

    /// Logits of the plain transformer: every position through every layer.
    pub fn forward_full(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let h = self.embed(tokens)?;
        let h = self.forward_range_uncached(&h, 0..self.config.n_layers, &positions)?;
        self.lm_head(&h)
    }
}

/// Positions that must come from the cache: everything up to the last
/// in-flight row that is not itself in flight.
fn cache_prefix_positions(rows: &Rows) -> Result<Vec<usize>> {
    if rows.segments.len() != 1 {
        return Err(Error::contract("cached passes run a single sequence"));
    }
    if rows.positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(format!(
            "positions must be strictly increasing, got {:?}",
            rows.positions
        )));
    }
    let Some(&last) = rows.positions.last() else {
        return Ok(Vec::new());
    };
    Ok((0..last).filter(|p| rows.positions.binary_search(p).is_err()).collect())
}
