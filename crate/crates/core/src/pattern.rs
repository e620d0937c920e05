//! Color pattern engine: relation-matrix initialization, per-generation
//! similarity updates, cross-channel embedding updates, and prediction.
//!
//! Channel 0 is the core channel. Each generation first refreshes all three
//! relation matrices from the previous embeddings, then updates the core
//! embedding from the masked auxiliary aggregates and both auxiliary
//! embeddings through the core relation matrix. Both embedding updates read
//! the previous generation's matrices.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::echelon::{EmbeddingTriple, CHANNELS};
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::params::{self, Bindings, Linear, ParamStore};

/// `M⁰`: Kronecker delta inside the support block and inside the query
/// block, `1/K` between the two blocks.
pub fn init_relations(spec: &EpisodeSpec) -> Result<Array2<f64>> {
    if spec.ways == 0 || spec.shots == 0 || spec.queries == 0 {
        return Err(Error::Config(format!(
            "K, N, Q must be positive (got {}, {}, {})",
            spec.ways, spec.shots, spec.queries
        )));
    }
    let t = spec.total();
    let ns = spec.support_len();
    let cross = 1.0 / spec.ways as f64;
    Ok(Array2::from_shape_fn((t, t), |(i, j)| {
        if (i < ns) == (j < ns) {
            if i == j {
                1.0
            } else {
                0.0
            }
        } else {
            cross
        }
    }))
}

pub fn gen_prefix(generation: usize) -> String {
    format!("pattern.gen{generation}")
}

/// The three-layer edge network that scores `|e_i − e_j|`.
#[derive(Debug, Clone, Copy)]
pub struct SimMetricParams {
    pub layers: [Linear; 3],
}

impl SimMetricParams {
    pub fn bind(binds: &Bindings, prefix: &str) -> Result<Self> {
        Ok(Self {
            layers: [
                binds.linear(&format!("{prefix}.l1"))?,
                binds.linear(&format!("{prefix}.l2"))?,
                binds.linear(&format!("{prefix}.l3"))?,
            ],
        })
    }
}

/// Parameters of one generation.
#[derive(Debug, Clone, Copy)]
pub struct GenerationParams {
    pub sim: [SimMetricParams; CHANNELS],
    /// Core-channel fusion, `3d → d`.
    pub fuse: Linear,
    /// Auxiliary-channel transforms, `d → d`.
    pub aux: [Linear; 2],
}

impl GenerationParams {
    pub fn bind(binds: &Bindings, generation: usize) -> Result<Self> {
        let p = gen_prefix(generation);
        Ok(Self {
            sim: [
                SimMetricParams::bind(binds, &format!("{p}.sim.ch0"))?,
                SimMetricParams::bind(binds, &format!("{p}.sim.ch1"))?,
                SimMetricParams::bind(binds, &format!("{p}.sim.ch2"))?,
            ],
            fuse: binds.linear(&format!("{p}.fuse"))?,
            aux: [
                binds.linear(&format!("{p}.aux.ch1"))?,
                binds.linear(&format!("{p}.aux.ch2"))?,
            ],
        })
    }
}

pub fn bind_generations(binds: &Bindings, depth: usize) -> Result<Vec<GenerationParams>> {
    (1..=depth).map(|n| GenerationParams::bind(binds, n)).collect()
}

/// Trainable scalars of one generation for embedding width `d`.
pub fn generation_param_count(d: usize) -> usize {
    let sim = params::linear_count(d, 2 * d) + params::linear_count(2 * d, d) + params::linear_count(d, 1);
    CHANNELS * sim + params::linear_count(3 * d, d) + 2 * params::linear_count(d, d)
}

pub fn init_generation<R: Rng>(store: &mut ParamStore, rng: &mut R, generation: usize, d: usize) {
    let p = gen_prefix(generation);
    for ch in 0..CHANNELS {
        let s = format!("{p}.sim.ch{ch}");
        params::insert_linear(store, rng, &format!("{s}.l1"), d, 2 * d);
        params::insert_linear(store, rng, &format!("{s}.l2"), 2 * d, d);
        params::insert_linear(store, rng, &format!("{s}.l3"), d, 1);
    }
    params::insert_linear(store, rng, &format!("{p}.fuse"), 3 * d, d);
    params::insert_linear(store, rng, &format!("{p}.aux.ch1"), d, d);
    params::insert_linear(store, rng, &format!("{p}.aux.ch2"), d, d);
}

/// Logistic similarity for every row pair of `a: [A, d]` and `b: [B, d]`,
/// returned as `[A, B]` with entries in (0, 1).
pub fn pair_similarity(g: &mut Graph, a: Var, b: Var, sim: &SimMetricParams) -> Result<Var> {
    let logits = pair_logits(g, a, b, sim)?;
    Ok(g.sigmoid(logits))
}

/// Edge-network scores before the logistic squashing, `[A, B]`.
pub fn pair_logits(g: &mut Graph, a: Var, b: Var, sim: &SimMetricParams) -> Result<Var> {
    let diffs = g.pairwise_abs_diff(a, b)?;
    let s = g.shape(diffs).to_vec();
    let mut h = g.reshape(diffs, &[s[0] * s[1], s[2]])?;
    h = sim.layers[0].apply(g, h)?;
    h = g.elu(h);
    h = sim.layers[1].apply(g, h)?;
    h = g.elu(h);
    h = sim.layers[2].apply(g, h)?;
    g.reshape(h, &[s[0], s[1]])
}

/// One relation-matrix update: `row_normalize(s ⊙ m_prev)` with
/// `s_ij = σ(edge_net(|e_i − e_j|))`.
pub fn sim_metric(g: &mut Graph, m_prev: Var, e_prev: Var, sim: &SimMetricParams) -> Result<Var> {
    let t = g.shape(e_prev)[0];
    if g.shape(m_prev) != [t, t] {
        return Err(Error::shape(format!(
            "relation matrix {:?} does not match {t} embeddings",
            g.shape(m_prev)
        )));
    }
    let s = pair_similarity(g, e_prev, e_prev, sim)?;
    let weighted = g.mul(s, m_prev)?;
    g.row_normalize(weighted)
}

/// `(m with its diagonal zeroed) · e`.
pub fn masked_aggregate(g: &mut Graph, m: Var, e: Var) -> Result<Var> {
    let sh = g.shape(m).to_vec();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(Error::shape(format!("masked_aggregate needs a square matrix, got {sh:?}")));
    }
    let t = sh[0];
    let mask = g.constant(
        Array2::from_shape_fn((t, t), |(i, j)| if i == j { 0.0 } else { 1.0 })
            .into_dyn(),
    );
    let masked = g.mul(m, mask)?;
    g.matmul(masked, e)
}

/// Core-channel embedding update: fuse `[e1; agg(m2, e2); agg(m3, e3)]`
/// back to `d`, add the residual `e1`, apply ELU.
pub fn core_update(g: &mut Graph, e: &[Var; CHANNELS], m: &[Var; CHANNELS], fuse: &Linear) -> Result<Var> {
    let a2 = masked_aggregate(g, m[1], e[1])?;
    let a3 = masked_aggregate(g, m[2], e[2])?;
    if g.shape(a2) != g.shape(e[0]) || g.shape(a3) != g.shape(e[0]) {
        return Err(Error::shape("core update: channel embeddings differ in shape"));
    }
    let cat = g.concat(&[e[0], a2, a3], 1)?;
    let fused = fuse.apply(g, cat)?;
    let res = g.add(fused, e[0])?;
    Ok(g.elu(res))
}

/// Auxiliary-channel update through the core relation matrix:
/// `elu(transform(m1 · e_aux) + e_aux)`.
pub fn aux_update(g: &mut Graph, m1_prev: Var, e_aux_prev: Var, transform: &Linear) -> Result<Var> {
    let agg = g.matmul(m1_prev, e_aux_prev)?;
    let y = transform.apply(g, agg)?;
    let res = g.add(y, e_aux_prev)?;
    Ok(g.elu(res))
}

/// Relation matrices and embeddings after generation `generation`.
#[derive(Debug, Clone, Copy)]
pub struct RelationState {
    pub m: [Var; CHANNELS],
    pub e: [Var; CHANNELS],
    pub generation: usize,
}

/// Runs all generations; returns states `1..=g` in order.
pub fn run_patterns(
    g: &mut Graph,
    initial: &EmbeddingTriple,
    spec: &EpisodeSpec,
    generations: &[GenerationParams],
) -> Result<Vec<RelationState>> {
    if generations.is_empty() {
        return Err(Error::Config("pattern depth must be at least 1".into()));
    }
    let t = spec.total();
    for e in &initial.e {
        if g.shape(*e).len() != 2 || g.shape(*e)[0] != t {
            return Err(Error::shape(format!(
                "initial embeddings {:?} do not have {t} rows",
                g.shape(*e)
            )));
        }
    }
    let m0 = g.constant(init_relations(spec)?.into_dyn());
    let mut m = [m0; CHANNELS];
    let mut e = initial.e;
    let mut states = Vec::with_capacity(generations.len());
    for (idx, gp) in generations.iter().enumerate() {
        let n = idx + 1;
        let at = |err: Error| match err {
            Error::Shape(s) => Error::Shape(format!("generation {n}: {s}")),
            Error::Numeric { location, detail } => Error::Numeric {
                location: format!("generation {n}: {location}"),
                detail,
            },
            other => other,
        };
        let mut next_m = m;
        for ch in 0..CHANNELS {
            next_m[ch] = sim_metric(g, m[ch], e[ch], &gp.sim[ch]).map_err(at)?;
        }
        let e1 = core_update(g, &e, &m, &gp.fuse).map_err(at)?;
        let e2 = aux_update(g, m[0], e[1], &gp.aux[0]).map_err(at)?;
        let e3 = aux_update(g, m[0], e[2], &gp.aux[1]).map_err(at)?;
        m = next_m;
        e = [e1, e2, e3];
        states.push(RelationState {
            m,
            e,
            generation: n,
        });
    }
    Ok(states)
}

/// Class per query from the query-rows × support-columns block of the final
/// core relation matrix. Support columns of one class are summed; ties go to
/// the lowest class index.
pub fn predict_labels(m1_final: ArrayView2<'_, f64>, spec: &EpisodeSpec) -> Result<Vec<usize>> {
    let t = spec.total();
    if m1_final.dim() != (t, t) {
        return Err(Error::shape(format!(
            "relation matrix {:?} does not match episode size {t}",
            m1_final.dim()
        )));
    }
    let ns = spec.support_len();
    let mut out = Vec::with_capacity(spec.query_len());
    for i in ns..t {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..spec.ways {
            let score: f64 = (c * spec.shots..(c + 1) * spec.shots)
                .map(|j| m1_final[[i, j]])
                .sum();
            if score > best_score {
                best = c;
                best_score = score;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Accuracy of predictions against the episode's query labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len().max(1) as f64
}
