//! Training objectives: per-channel matrix classification loss, embedding
//! similarity loss, their weighted total, and the distillation KL term.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::echelon::CHANNELS;
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::pattern::{self, RelationState, SimMetricParams};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the two auxiliary-channel matrix losses.
    pub lambda: f64,
    /// Weight of the embedding similarity loss.
    pub beta: f64,
    /// Weight of the distillation term.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            beta: 0.1,
            gamma: 1e-4,
        }
    }
}

/// Component losses of one generation on one episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationLosses {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub le: f64,
}

impl GenerationLosses {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        self.l1 + w.lambda * (self.l2 + self.l3) + w.beta * self.le
    }
}

/// Loss components of one training step, indexed `[generation][episode]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub per_gen: Vec<Vec<GenerationLosses>>,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossTerms {
    pub fn new(per_gen: Vec<Vec<GenerationLosses>>, weights: LossWeights) -> Self {
        let total = total_loss(&per_gen, &weights);
        Self {
            per_gen,
            weights,
            total,
        }
    }

    /// Component sums over generations and episodes: `(l1, l2, l3, le)`.
    pub fn sums(&self) -> GenerationLosses {
        let mut acc = GenerationLosses::default();
        for t in self.per_gen.iter().flatten() {
            acc.l1 += t.l1;
            acc.l2 += t.l2;
            acc.l3 += t.l3;
            acc.le += t.le;
        }
        acc
    }
}

/// `Σ_n Σ_b [l1 + λ(l2 + l3) + β·le]`, generations outermost.
pub fn total_loss(per_gen: &[Vec<GenerationLosses>], w: &LossWeights) -> f64 {
    let mut total = 0.0;
    for gen in per_gen {
        for t in gen {
            total += t.weighted(w);
        }
    }
    total
}

fn check_labels(spec: &EpisodeSpec, labels: &[usize]) -> Result<()> {
    if labels.len() != spec.total() || labels.iter().any(|&y| y >= spec.ways) {
        return Err(Error::Contract(format!(
            "{} labels do not fit a {}-way episode of {} samples",
            labels.len(),
            spec.ways,
            spec.total()
        )));
    }
    Ok(())
}

/// `[NK, K]` one-hot matrix of the support labels.
fn support_onehot(g: &mut Graph, spec: &EpisodeSpec, labels: &[usize]) -> Var {
    let ns = spec.support_len();
    let m = Array2::from_shape_fn((ns, spec.ways), |(j, c)| if labels[j] == c { 1.0 } else { 0.0 });
    g.constant(m.into_dyn())
}

/// Sums support-column scores per class and applies summed cross-entropy
/// against the query labels.
fn class_score_loss(g: &mut Graph, scores: Var, spec: &EpisodeSpec, labels: &[usize]) -> Result<Var> {
    let onehot = support_onehot(g, spec, labels);
    let class_scores = g.matmul(scores, onehot)?;
    g.cross_entropy(class_scores, &labels[spec.support_len()..])
}

/// Cross-entropy of the class sums of the query × support block of `m`.
pub fn matrix_class_loss(g: &mut Graph, m: Var, spec: &EpisodeSpec, labels: &[usize]) -> Result<Var> {
    check_labels(spec, labels)?;
    let t = spec.total();
    if g.shape(m) != [t, t] {
        return Err(Error::Contract(format!("relation matrix {:?} for T = {t}", g.shape(m))));
    }
    let ns = spec.support_len();
    let rows = g.slice(m, 0, ns, t)?;
    let block = g.slice(rows, 1, 0, ns)?;
    class_score_loss(g, block, spec, labels)
}

/// Negated L1 distance between each query and each support embedding.
pub fn embedding_scores(g: &mut Graph, e: Var, spec: &EpisodeSpec) -> Result<Var> {
    let t = spec.total();
    let sh = g.shape(e).to_vec();
    if sh.len() != 2 || sh[0] != t {
        return Err(Error::Contract(format!("embeddings {sh:?} for T = {t}")));
    }
    let ns = spec.support_len();
    let queries = g.slice(e, 0, ns, t)?;
    let support = g.slice(e, 0, 0, ns)?;
    let diffs = g.pairwise_abs_diff(queries, support)?;
    let dist = g.sum_axis(diffs, 2)?;
    Ok(g.scale(dist, -1.0))
}

/// Cross-entropy of class sums of negated L1 distances to the support set.
pub fn embedding_sim_loss(g: &mut Graph, e: Var, spec: &EpisodeSpec, labels: &[usize]) -> Result<Var> {
    check_labels(spec, labels)?;
    let scores = embedding_scores(g, e, spec)?;
    class_score_loss(g, scores, spec, labels)
}

/// Builds the weighted episode loss over all generations and records the
/// component values.
pub fn episode_loss(
    g: &mut Graph,
    states: &[RelationState],
    spec: &EpisodeSpec,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(Var, Vec<GenerationLosses>)> {
    let mut total: Option<Var> = None;
    let mut parts = Vec::with_capacity(states.len());
    for st in states {
        let mut l = [st.m[0]; CHANNELS];
        for ch in 0..CHANNELS {
            l[ch] = matrix_class_loss(g, st.m[ch], spec, labels)?;
        }
        let le = embedding_sim_loss(g, st.e[0], spec, labels)?;
        parts.push(GenerationLosses {
            l1: g.scalar(l[0]),
            l2: g.scalar(l[1]),
            l3: g.scalar(l[2]),
            le: g.scalar(le),
        });
        let aux = g.add(l[1], l[2])?;
        let aux = g.scale(aux, w.lambda);
        let sim = g.scale(le, w.beta);
        let gen = g.add(l[0], aux)?;
        let gen = g.add(gen, sim)?;
        total = Some(match total {
            None => gen,
            Some(acc) => g.add(acc, gen)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no generations to score".into()))?;
    Ok((total, parts))
}

/// Row-softmax over support columns of the edge-network scores between each
/// query and each support embedding.
pub fn similarity_rows(g: &mut Graph, e_final: Var, sim: &SimMetricParams, spec: &EpisodeSpec) -> Result<Var> {
    let t = spec.total();
    if g.shape(e_final).first() != Some(&t) {
        return Err(Error::Contract(format!("embeddings {:?} for T = {t}", g.shape(e_final))));
    }
    let ns = spec.support_len();
    let queries = g.slice(e_final, 0, ns, t)?;
    let support = g.slice(e_final, 0, 0, ns)?;
    let logits = pattern::pair_logits(g, queries, support, sim)?;
    g.softmax_last(logits)
}

/// `γ · Σ_rows KL(teacher ∥ student)`.
pub fn distill_kl(g: &mut Graph, student_rows: Var, teacher_rows: Var, gamma: f64) -> Result<Var> {
    if g.shape(student_rows) != g.shape(teacher_rows) {
        return Err(Error::Contract(format!(
            "student rows {:?} vs teacher rows {:?}",
            g.shape(student_rows),
            g.shape(teacher_rows)
        )));
    }
    let kl = g.kl_div(teacher_rows, student_rows, PROB_FLOOR)?;
    Ok(g.scale(kl, gamma))
}
