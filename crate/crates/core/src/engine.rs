//! Training, evaluation and distillation drivers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::checkpoint::Checkpoint;
use crate::episodes::{DataSource, Episode, EpisodeSpec, Prefetcher};
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, MetricRecord, TrainRecord};
use crate::model::{Model, ModelConfig};
use crate::objective::{self, GenerationLosses, LossTerms, LossWeights};
use crate::optim::{AdamConfig, AdamW};
use crate::pattern::SimMetricParams;

/// Episode stream used for training draws.
pub const TRAIN_STREAM: u64 = 1;
/// Episode stream used for evaluation draws.
pub const EVAL_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: u64,
    /// Episodes per optimizer step.
    pub batch_episodes: usize,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub loss: LossWeights,
    /// Episodes produced ahead of the training loop.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            iterations: 2000,
            batch_episodes: 1,
            seed: 0,
            eval_every: 0,
            eval_episodes: 600,
            loss: LossWeights::default(),
            prefetch: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_episodes == 0 {
            return Err(Error::Config("batch_episodes must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub episodes_evaluated: usize,
    pub per_episode_accuracies: Vec<f64>,
}

impl EvalReport {
    /// Mean and `1.96 · s / √E` with the sample standard deviation `s`
    /// (zero for a single episode).
    pub fn from_accuracies(acc: Vec<f64>) -> Result<Self> {
        if acc.is_empty() {
            return Err(Error::Contract("no episodes evaluated".into()));
        }
        let n = acc.len() as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let std = if acc.len() > 1 {
            (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            mean_accuracy: mean,
            ci95_halfwidth: 1.96 * std / n.sqrt(),
            episodes_evaluated: acc.len(),
            per_episode_accuracies: acc,
        })
    }

    /// `"93.47 ± 0.52"`, both in percent.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean_accuracy, 100.0 * self.ci95_halfwidth)
    }
}

/// Model accuracy over `episodes` draws of the evaluation stream.
pub fn evaluate(model: &Model, source: &DataSource, spec: &EpisodeSpec, episodes: usize, seed: u64) -> Result<EvalReport> {
    spec.validate()?;
    let mut acc = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let ep = source.nth_episode(spec, seed, EVAL_STREAM, i as u64)?;
        let pred = model.predict(&ep, spec)?;
        acc.push(crate::pattern::accuracy(&pred, &ep.query_labels));
    }
    EvalReport::from_accuracies(acc)
}

/// Result of a training or distillation run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
}

/// A frozen teacher and the distillation weight.
struct Teacher<'a> {
    model: &'a Model,
    gamma: f64,
}

/// Trains a fresh model initialized from `cfg.seed`.
pub fn train(model_cfg: ModelConfig, source: &DataSource, spec: &EpisodeSpec, cfg: &TrainConfig) -> Result<RunOutput> {
    run(model_cfg, source, spec, cfg, None)
}

/// Trains `student_cfg` against a frozen teacher. The student must have
/// attention disabled and the same task shape as the teacher.
pub fn distill(
    teacher: &Checkpoint,
    student_cfg: ModelConfig,
    source: &DataSource,
    spec: &EpisodeSpec,
    cfg: &TrainConfig,
) -> Result<RunOutput> {
    if !teacher.task.same_task_shape(spec) {
        return Err(Error::Config(format!(
            "teacher was trained on {}-way {}-shot {}-query tasks, student asks for {}-way {}-shot {}-query",
            teacher.task.ways, teacher.task.shots, teacher.task.queries, spec.ways, spec.shots, spec.queries
        )));
    }
    if student_cfg.echelon.attention_enabled {
        return Err(Error::Config("the distilled student must have attention disabled".into()));
    }
    if student_cfg.echelon.embed_dim != teacher.model.config.echelon.embed_dim {
        return Err(Error::Config("student and teacher embedding widths differ".into()));
    }
    let mut frozen = teacher.model.clone();
    frozen.params.freeze_all();
    let t = Teacher {
        model: &frozen,
        gamma: cfg.loss.gamma,
    };
    run(student_cfg, source, spec, cfg, Some(t))
}

fn final_sim(binds: &crate::params::Bindings, depth: usize) -> Result<SimMetricParams> {
    SimMetricParams::bind(binds, &format!("{}.sim.ch0", crate::pattern::gen_prefix(depth)))
}

/// Query rows of the teacher's final similarity distribution, as plain values.
fn teacher_rows(teacher: &Model, episode: &Episode, spec: &EpisodeSpec) -> Result<Tensor> {
    let batch = teacher.prepare(episode)?;
    let mut g = Graph::new();
    let binds = teacher.params.bind(&mut g);
    let pass = teacher.forward(&mut g, &binds, &batch, spec, false)?;
    let sim = final_sim(&binds, teacher.config.pattern_depth)?;
    let rows = objective::similarity_rows(&mut g, pass.final_state().e[0], &sim, spec)?;
    Ok(g.value(rows).clone())
}

struct StepOutcome {
    parts: Vec<GenerationLosses>,
    distill: f64,
}

fn episode_step(
    model: &mut Model,
    episode: &Episode,
    spec: &EpisodeSpec,
    weights: &LossWeights,
    teacher: Option<&Teacher<'_>>,
    grads: &mut BTreeMap<String, Tensor>,
) -> Result<StepOutcome> {
    let batch = model.prepare(episode)?;
    let mut g = Graph::new();
    let binds = model.params.bind(&mut g);
    let pass = model.forward(&mut g, &binds, &batch, spec, true)?;
    let labels = episode.labels();
    let (mut loss, parts) = objective::episode_loss(&mut g, &pass.states, spec, &labels, weights)?;
    let mut distill = 0.0;
    if let Some(t) = teacher.filter(|t| t.gamma != 0.0) {
        let target = g.constant(teacher_rows(t.model, episode, spec)?);
        let sim = final_sim(&binds, model.config.pattern_depth)?;
        let rows = objective::similarity_rows(&mut g, pass.final_state().e[0], &sim, spec)?;
        let kl = objective::distill_kl(&mut g, rows, target, t.gamma)?;
        distill = g.scalar(kl);
        loss = g.add(loss, kl)?;
    }
    if g.scalar(loss).is_finite() {
        let mut gr = g.backward(loss)?;
        for (name, var) in binds.iter() {
            if let Some(t) = gr.take(*var) {
                match grads.get_mut(name) {
                    Some(acc) => *acc += &t,
                    None => {
                        grads.insert(name.clone(), t);
                    }
                }
            }
        }
        model.apply_batch_stats(&pass.stats)?;
    }
    Ok(StepOutcome { parts, distill })
}

fn run(
    model_cfg: ModelConfig,
    source: &DataSource,
    spec: &EpisodeSpec,
    cfg: &TrainConfig,
    teacher: Option<Teacher<'_>>,
) -> Result<RunOutput> {
    cfg.validate()?;
    spec.validate()?;
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let mut optimizer = AdamW::new(cfg.adam());
    let mut metrics = Vec::new();
    let total_draws = cfg.iterations * cfg.batch_episodes as u64;
    let mut episodes = Prefetcher::spawn(source.clone(), *spec, cfg.seed, TRAIN_STREAM, total_draws, cfg.prefetch);
    let depth = model.config.pattern_depth;

    for it in 1..=cfg.iterations {
        let mut grads = BTreeMap::new();
        let mut per_gen = vec![Vec::with_capacity(cfg.batch_episodes); depth];
        let mut distill = 0.0;
        for _ in 0..cfg.batch_episodes {
            let ep = episodes
                .next()
                .ok_or_else(|| Error::Sampling("episode producer stopped early".into()))??;
            let out = episode_step(&mut model, &ep, spec, &cfg.loss, teacher.as_ref(), &mut grads)?;
            for (n, p) in out.parts.into_iter().enumerate() {
                per_gen[n].push(p);
            }
            distill += out.distill;
        }
        let terms = LossTerms::new(per_gen, cfg.loss);
        let sums = terms.sums();
        let total = terms.total + distill;
        let finite = [total, sums.l1, sums.l2, sums.l3, sums.le, distill]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteLoss {
                iteration: it as usize,
                breakdown: format!(
                    "l1={} l2={} l3={} le={} distill={} total={}",
                    sums.l1, sums.l2, sums.l3, sums.le, distill, total
                ),
            });
        }
        optimizer.step(&mut model.params, &grads)?;
        metrics.push(MetricRecord::Train(TrainRecord {
            iteration: it,
            total,
            classification: terms.total,
            l1: sums.l1,
            l2: sums.l2,
            l3: sums.l3,
            le: sums.le,
            distill,
        }));
        if cfg.eval_every > 0 && it % cfg.eval_every == 0 {
            let report = evaluate(&model, source, spec, cfg.eval_episodes, cfg.seed)?;
            metrics.push(MetricRecord::Eval(EvalRecord {
                iteration: it,
                accuracy: report.mean_accuracy,
                ci95: report.ci95_halfwidth,
                episodes: report.episodes_evaluated,
            }));
        }
    }
    Ok(RunOutput {
        checkpoint: Checkpoint {
            model,
            optimizer,
            task: *spec,
            iteration: cfg.iterations,
        },
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echelon::EchelonConfig;
    use crate::episodes::SynthParams;

    fn tiny_model(depth: usize) -> ModelConfig {
        ModelConfig {
            echelon: EchelonConfig {
                stage_widths: [4, 8, 8, 8],
                embed_dim: 8,
                ..EchelonConfig::default()
            },
            pattern_depth: depth,
            ..ModelConfig::default()
        }
    }

    fn spec() -> EpisodeSpec {
        EpisodeSpec::new(3, 1, 2).with_image_size(8, 8)
    }

    fn quick(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            seed: 5,
            eval_every: 2,
            eval_episodes: 3,
            batch_episodes: 2,
            ..TrainConfig::default()
        }
    }

    fn synthetic() -> DataSource {
        DataSource::Synthetic(SynthParams::default())
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_accuracies(vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(r.ci95_halfwidth, 0.0);
        assert_eq!(r.mean_accuracy, 0.5);
        let r = EvalReport::from_accuracies(vec![0.2, 0.4]).unwrap();
        let s = ((0.1f64.powi(2) * 2.0) / 1.0).sqrt();
        assert!((r.ci95_halfwidth - 1.96 * s / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(EvalReport::from_accuracies(vec![0.7]).unwrap().ci95_halfwidth, 0.0);
        assert!(EvalReport::from_accuracies(vec![]).is_err());
        assert_eq!(r.summary(), format!("30.00 ± {:.2}", 100.0 * r.ci95_halfwidth));
    }

    #[test]
    fn zero_iterations_returns_initial_model() {
        let out = train(tiny_model(1), &synthetic(), &spec(), &quick(0)).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.checkpoint.model, Model::new(tiny_model(1), 5).unwrap());
        assert_eq!(out.checkpoint.iteration, 0);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_iteration() {
        let a = train(tiny_model(2), &synthetic(), &spec(), &quick(4)).unwrap();
        let b = train(tiny_model(2), &synthetic(), &spec(), &quick(4)).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint, b.checkpoint);
        let trains = a.metrics.iter().filter(|m| matches!(m, MetricRecord::Train(_))).count();
        let evals = a.metrics.len() - trains;
        assert_eq!((trains, evals), (4, 2));
        assert_ne!(a.checkpoint.model.params, Model::new(tiny_model(2), 5).unwrap().params);
    }

    #[test]
    fn evaluation_is_read_only() {
        let model = Model::new(tiny_model(1), 1).unwrap();
        let before = model.clone();
        let r = evaluate(&model, &synthetic(), &spec(), 4, 0).unwrap();
        assert_eq!(model, before);
        assert_eq!(r.episodes_evaluated, 4);
        assert!((0.0..=1.0).contains(&r.mean_accuracy));
    }

    #[test]
    fn distill_rejects_mismatches() {
        let teacher = train(tiny_model(1), &synthetic(), &spec(), &quick(0)).unwrap().checkpoint;
        let mut student = tiny_model(1);
        student.echelon.attention_enabled = false;
        let other = EpisodeSpec::new(4, 1, 2).with_image_size(8, 8);
        assert!(matches!(
            distill(&teacher, student.clone(), &synthetic(), &other, &quick(1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            distill(&teacher, tiny_model(1), &synthetic(), &spec(), &quick(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn distillation_components_add_up() {
        let teacher = train(tiny_model(2), &synthetic(), &spec(), &quick(2)).unwrap().checkpoint;
        let mut student = tiny_model(1);
        student.echelon.attention_enabled = false;
        let cfg = TrainConfig {
            loss: LossWeights {
                gamma: 0.5,
                ..LossWeights::default()
            },
            ..quick(2)
        };
        let out = distill(&teacher, student, &synthetic(), &spec(), &cfg).unwrap();
        for m in &out.metrics {
            if let MetricRecord::Train(t) = m {
                assert!(t.distill > 0.0);
                assert_eq!(t.total, t.classification + t.distill);
            }
        }
    }
}
