//! Feature echelon: per-channel staged convolutional encoding, cross-channel
//! attention over the three stage-4 map groups, and projection to embeddings.
//!
//! Each of the three channels runs through four stages, each a 3×3
//! convolution, batch normalization, ELU and 2×2 average pooling. The
//! attention block lets every channel attend over the spatial positions of
//! the other two channels; the projection pools globally and maps to
//! `embed_dim`.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Tensor, Var};
use crate::color::ChannelGroup;
use crate::error::{Error, Result};
use crate::params::{self, Bindings, Buffers, ParamStore};

pub const CHANNELS: usize = 3;
pub const STAGES: usize = 4;
pub const STAGE_NAMES: [&str; STAGES] = ["stage1", "stage2", "stage3", "stage4"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EchelonConfig {
    pub stage_widths: [usize; STAGES],
    pub embed_dim: usize,
    pub attention_enabled: bool,
    pub share_branch_params: bool,
}

impl Default for EchelonConfig {
    fn default() -> Self {
        Self {
            stage_widths: [48, 96, 192, 384],
            embed_dim: 128,
            attention_enabled: true,
            share_branch_params: false,
        }
    }
}

impl EchelonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.iter().any(|&w| w == 0) || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "stage widths {:?} and embed dim {} must be positive",
                self.stage_widths, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn out_width(&self) -> usize {
        self.stage_widths[STAGES - 1]
    }

    /// Query/key width of the attention block.
    pub fn attention_dim(&self) -> usize {
        (self.out_width() / 8).max(1)
    }

    fn branches(&self) -> usize {
        if self.share_branch_params {
            1
        } else {
            CHANNELS
        }
    }

    pub fn branch_prefix(&self, channel: usize) -> String {
        if self.share_branch_params {
            "echelon.shared".to_string()
        } else {
            format!("echelon.ch{channel}")
        }
    }

    pub fn attention_prefix(&self, channel: usize) -> String {
        if self.share_branch_params {
            "attention.shared".to_string()
        } else {
            format!("attention.ch{channel}")
        }
    }

    pub fn projection_prefix(&self, channel: usize) -> String {
        if self.share_branch_params {
            "proj.shared".to_string()
        } else {
            format!("proj.ch{channel}")
        }
    }

    /// Spatial extent after the four pooling stages.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (0..STAGES).fold((h, w), |(h, w), _| ((h / 2).max(1), (w / 2).max(1)))
    }

    /// Trainable scalars in the branches, attention block and projection.
    pub fn param_count(&self) -> usize {
        let mut per_branch = 0;
        let mut cin = 1;
        for &w in &self.stage_widths {
            per_branch += cin * 9 * w + w + 2 * w;
            cin = w;
        }
        let c = self.out_width();
        let dk = self.attention_dim();
        let attention = if self.attention_enabled {
            2 * params::linear_count(c, dk) + params::linear_count(c, c)
        } else {
            0
        };
        let projection = params::linear_count(c, self.embed_dim);
        self.branches() * (per_branch + attention + projection)
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, buffers: &mut Buffers, rng: &mut R) {
        let c = self.out_width();
        let dk = self.attention_dim();
        for ch in 0..self.branches() {
            let prefix = self.branch_prefix(ch);
            let mut cin = 1;
            for (s, &w) in self.stage_widths.iter().enumerate() {
                let stage = format!("{prefix}.{}", STAGE_NAMES[s]);
                store.insert(format!("{stage}.conv.w"), params::he_normal(rng, &[w, cin * 9], cin * 9));
                store.insert(format!("{stage}.conv.b"), params::zeros(&[w]));
                store.insert(format!("{stage}.norm.gamma"), params::ones(&[w]));
                store.insert(format!("{stage}.norm.beta"), params::zeros(&[w]));
                buffers.insert(format!("{stage}.norm.mean"), vec![0.0; w]);
                buffers.insert(format!("{stage}.norm.var"), vec![1.0; w]);
                cin = w;
            }
            if self.attention_enabled {
                let a = self.attention_prefix(ch);
                params::insert_linear(store, rng, &format!("{a}.query"), c, dk);
                params::insert_linear(store, rng, &format!("{a}.key"), c, dk);
                params::insert_linear(store, rng, &format!("{a}.value"), c, c);
            }
            params::insert_linear(store, rng, &self.projection_prefix(ch), c, self.embed_dim);
        }
    }
}

/// Trainable scalars of the encoder plus `depth` pattern generations.
pub fn count_params(cfg: &EchelonConfig, depth: usize) -> usize {
    cfg.param_count() + depth * crate::pattern::generation_param_count(cfg.embed_dim)
}

/// Per-channel input planes for a whole episode, each `[T, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelBatch {
    pub planes: [Tensor; CHANNELS],
}

impl ChannelBatch {
    pub fn from_groups(groups: &[ChannelGroup]) -> Result<Self> {
        let first = groups
            .first()
            .ok_or_else(|| Error::shape("empty image batch"))?;
        let (h, w) = first.dim();
        if groups.iter().any(|g| g.dim() != (h, w)) {
            return Err(Error::shape("all images of an episode must share H×W"));
        }
        let t = groups.len();
        let plane = |k: usize| {
            let mut out = ArrayD::zeros(IxDyn(&[t, 1, h, w]));
            for (i, grp) in groups.iter().enumerate() {
                out.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&grp.planes[k].view().into_dyn());
            }
            out
        };
        Ok(Self {
            planes: [plane(0), plane(1), plane(2)],
        })
    }

    pub fn len(&self) -> usize {
        self.planes[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How normalization layers obtain their statistics.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Statistics of the current batch; measured statistics are returned.
    Batch,
    /// Frozen running statistics.
    Running(&'a Buffers),
}

/// Statistics measured during a [`NormMode::Batch`] forward pass, keyed by
/// the normalization layer's name prefix.
pub type MeasuredStats = Vec<(String, BatchStats)>;

fn check_finite(g: &Graph, v: Var, location: impl FnOnce() -> String) -> Result<()> {
    if g.value(v).iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric(location(), "non-finite activation"));
    }
    Ok(())
}

/// Runs the three channel branches: `[T, 1, H, W]` planes → stage-4 maps.
pub fn echelon_forward(
    g: &mut Graph,
    cfg: &EchelonConfig,
    binds: &Bindings,
    inputs: &[Var; CHANNELS],
    mode: NormMode<'_>,
) -> Result<([Var; CHANNELS], MeasuredStats)> {
    let shape = g.shape(inputs[0]).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::shape(format!("echelon input must be [T, 1, H, W], got {shape:?}")));
    }
    if inputs.iter().any(|&v| g.shape(v) != shape.as_slice()) {
        return Err(Error::shape("channel planes differ in shape"));
    }
    let mut stats = Vec::new();
    let mut outputs = *inputs;
    for (ch, out) in outputs.iter_mut().enumerate() {
        let prefix = cfg.branch_prefix(ch);
        let mut x = *out;
        for (s, name) in STAGE_NAMES.iter().enumerate() {
            let stage = format!("{prefix}.{name}");
            let w = binds.get(&format!("{stage}.conv.w"))?;
            let b = binds.get(&format!("{stage}.conv.b"))?;
            let gamma = binds.get(&format!("{stage}.norm.gamma"))?;
            let beta = binds.get(&format!("{stage}.norm.beta"))?;
            let y = g.conv3x3(x, w, b)?;
            let y = match mode {
                NormMode::Batch => {
                    let (y, st) = g.batch_norm(y, gamma, beta)?;
                    stats.push((format!("{stage}.norm"), st));
                    y
                }
                NormMode::Running(buffers) => {
                    let mean = buffers.get(&format!("{stage}.norm.mean"))?;
                    let var = buffers.get(&format!("{stage}.norm.var"))?;
                    g.frozen_norm(y, gamma, beta, mean, var)?
                }
            };
            let y = g.elu(y);
            x = g.avg_pool2(y)?;
            check_finite(g, x, || format!("echelon channel {ch} stage {}", s + 1))?;
        }
        *out = x;
    }
    Ok((outputs, stats))
}

/// Attention weights used by [`cross_channel_attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionWeights {
    #[default]
    Softmax,
    /// Every key gets the same weight; a test hook.
    Uniform,
}

/// `[T, C, h, w]` → `[T, h·w, C]`.
fn to_tokens(g: &mut Graph, maps: Var) -> Result<Var> {
    let s = g.shape(maps).to_vec();
    let flat = g.reshape(maps, &[s[0], s[1], s[2] * s[3]])?;
    g.transpose_last(flat)
}

/// Applies a linear layer to the last axis of a `[T, P, C]` tensor.
fn token_linear(g: &mut Graph, tokens: Var, lin: &params::Linear) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let flat = g.reshape(tokens, &[s[0] * s[1], s[2]])?;
    let y = lin.apply(g, flat)?;
    let out = g.shape(y)[1];
    g.reshape(y, &[s[0], s[1], out])
}

/// Cross-channel attention with a residual connection. Queries come from the
/// channel itself; keys and values from the positions of the other two.
pub fn cross_channel_attention(
    g: &mut Graph,
    cfg: &EchelonConfig,
    binds: &Bindings,
    maps: &[Var; CHANNELS],
    weights: AttentionWeights,
) -> Result<[Var; CHANNELS]> {
    let shape = g.shape(maps[0]).to_vec();
    if shape.len() != 4 || maps.iter().any(|&m| g.shape(m) != shape.as_slice()) {
        return Err(Error::shape("attention inputs must be three equal [T, C, h, w] stacks"));
    }
    let tokens: Vec<Var> = maps
        .iter()
        .map(|&m| to_tokens(g, m))
        .collect::<Result<_>>()?;
    let (t, p) = (shape[0], shape[2] * shape[3]);
    let scale = 1.0 / (cfg.attention_dim() as f64).sqrt();
    let mut out = *maps;
    for ch in 0..CHANNELS {
        let prefix = cfg.attention_prefix(ch);
        let others = [tokens[(ch + 1) % CHANNELS], tokens[(ch + 2) % CHANNELS]];
        let context = g.concat(&others, 1)?; // [T, 2P, C]
        let value = token_linear(g, context, &binds.linear(&format!("{prefix}.value"))?)?;
        let attn = match weights {
            AttentionWeights::Softmax => {
                let q = token_linear(g, tokens[ch], &binds.linear(&format!("{prefix}.query"))?)?;
                let k = token_linear(g, context, &binds.linear(&format!("{prefix}.key"))?)?;
                let kt = g.transpose_last(k)?;
                let scores = g.batch_matmul(q, kt)?;
                let scores = g.scale(scores, scale);
                g.softmax_last(scores)?
            }
            AttentionWeights::Uniform => {
                g.constant(ArrayD::from_elem(IxDyn(&[t, p, 2 * p]), 1.0 / (2 * p) as f64))
            }
        };
        let attended = g.batch_matmul(attn, value)?; // [T, P, C]
        let mixed = g.add(tokens[ch], attended)?;
        let back = g.transpose_last(mixed)?;
        out[ch] = g.reshape(back, &shape)?;
    }
    Ok(out)
}

/// Per-channel `T×d` embeddings.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTriple {
    pub e: [Var; CHANNELS],
}

/// Global average pooling followed by a per-channel affine map to `embed_dim`.
pub fn project(g: &mut Graph, cfg: &EchelonConfig, binds: &Bindings, maps: &[Var; CHANNELS]) -> Result<EmbeddingTriple> {
    let mut e = *maps;
    for (ch, out) in e.iter_mut().enumerate() {
        let pooled = g.global_avg_pool(maps[ch])?;
        if g.shape(pooled)[1] != cfg.out_width() {
            return Err(Error::shape(format!(
                "projection expects {} input channels, got {}",
                cfg.out_width(),
                g.shape(pooled)[1]
            )));
        }
        *out = binds.linear(&cfg.projection_prefix(ch))?.apply(g, pooled)?;
    }
    Ok(EmbeddingTriple { e })
}

/// The full encoder: branches, optional attention, projection.
pub fn encode(
    g: &mut Graph,
    cfg: &EchelonConfig,
    binds: &Bindings,
    batch: &ChannelBatch,
    mode: NormMode<'_>,
) -> Result<(EmbeddingTriple, MeasuredStats)> {
    let inputs = [
        g.constant(batch.planes[0].clone()),
        g.constant(batch.planes[1].clone()),
        g.constant(batch.planes[2].clone()),
    ];
    let (maps, stats) = echelon_forward(g, cfg, binds, &inputs, mode)?;
    let maps = if cfg.attention_enabled {
        cross_channel_attention(g, cfg, binds, &maps, AttentionWeights::Softmax)?
    } else {
        maps
    };
    Ok((project(g, cfg, binds, &maps)?, stats))
}
