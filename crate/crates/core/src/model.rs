//! The full learner: color shunt, feature echelon and pattern generations
//! behind one set of named parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::color::{self, ColorSpace, ShuntNorm};
use crate::echelon::{self, ChannelBatch, EchelonConfig, EmbeddingTriple, MeasuredStats, NormMode};
use crate::episodes::{Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::params::{Bindings, Buffers, ParamStore};
use crate::pattern::{self, GenerationParams, RelationState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub color_space: ColorSpace,
    pub echelon: EchelonConfig,
    /// Number of pattern generations `g`.
    pub pattern_depth: usize,
    /// Weight of the newest batch in the running normalization statistics.
    pub norm_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            color_space: ColorSpace::default(),
            echelon: EchelonConfig::default(),
            pattern_depth: 5,
            norm_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.echelon.validate()?;
        if self.pattern_depth == 0 {
            return Err(Error::Config("pattern_depth must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(Error::Config(format!("norm_momentum {} outside [0, 1]", self.norm_momentum)));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        echelon::count_params(&self.echelon, self.pattern_depth)
    }

    pub fn shunt_norm(&self) -> ShuntNorm {
        ShuntNorm::for_space(self.color_space)
    }
}

/// Everything produced by one forward pass over an episode.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub initial: EmbeddingTriple,
    pub states: Vec<RelationState>,
    pub generations: Vec<GenerationParams>,
    pub stats: MeasuredStats,
}

impl ForwardPass {
    pub fn final_state(&self) -> &RelationState {
        self.states.last().expect("at least one generation")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: Buffers,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = Buffers::default();
        config.echelon.init_params(&mut params, &mut buffers, &mut rng);
        for n in 1..=config.pattern_depth {
            pattern::init_generation(&mut params, &mut rng, n, config.echelon.embed_dim);
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    /// Converts and splits every image of the episode, support first.
    pub fn prepare(&self, episode: &Episode) -> Result<ChannelBatch> {
        let norm = self.config.shunt_norm();
        let groups = episode
            .images()
            .map(|img| {
                let converted = color::convert(img.view(), self.config.color_space)?;
                color::shunt(converted.view(), &norm)
            })
            .collect::<Result<Vec<_>>>()?;
        ChannelBatch::from_groups(&groups)
    }

    /// Encoder and pattern generations. `Batch` mode normalizes with the
    /// episode's own statistics and returns them; `Running` uses the buffers.
    pub fn forward(
        &self,
        g: &mut Graph,
        binds: &Bindings,
        batch: &ChannelBatch,
        spec: &EpisodeSpec,
        training: bool,
    ) -> Result<ForwardPass> {
        if batch.len() != spec.total() {
            return Err(Error::shape(format!(
                "episode has {} images, task needs {}",
                batch.len(),
                spec.total()
            )));
        }
        let mode = if training {
            NormMode::Batch
        } else {
            NormMode::Running(&self.buffers)
        };
        let (initial, stats) = echelon::encode(g, &self.config.echelon, binds, batch, mode)?;
        let generations = pattern::bind_generations(binds, self.config.pattern_depth)?;
        let states = pattern::run_patterns(g, &initial, spec, &generations)?;
        Ok(ForwardPass {
            initial,
            states,
            generations,
            stats,
        })
    }

    /// Class predictions for the queries of an episode in evaluation mode.
    pub fn predict(&self, episode: &Episode, spec: &EpisodeSpec) -> Result<Vec<usize>> {
        let batch = self.prepare(episode)?;
        let mut g = Graph::new();
        let binds = self.params.bind_constant(&mut g);
        let pass = self.forward(&mut g, &binds, &batch, spec, false)?;
        let m = final_core_matrix(&g, pass.final_state().m[0])?;
        pattern::predict_labels(m.view(), spec)
    }

    /// Folds measured batch statistics into the running buffers.
    pub fn apply_batch_stats(&mut self, stats: &MeasuredStats) -> Result<()> {
        let mom = self.config.norm_momentum;
        for (prefix, st) in stats {
            for (suffix, batch) in [("mean", &st.mean), ("var", &st.var)] {
                let name = format!("{prefix}.{suffix}");
                let running = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::Contract(format!("buffer `{name}` is missing")))?;
                if running.len() != batch.len() {
                    return Err(Error::shape(format!("buffer `{name}` has the wrong width")));
                }
                for (r, b) in running.iter_mut().zip(batch.iter()) {
                    *r = (1.0 - mom) * *r + mom * b;
                }
            }
        }
        Ok(())
    }
}

fn final_core_matrix(g: &Graph, m: Var) -> Result<ndarray::Array2<f64>> {
    g.value(m)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{synth_episode, SynthParams};

    fn tiny() -> ModelConfig {
        ModelConfig {
            echelon: EchelonConfig {
                stage_widths: [4, 8, 8, 8],
                embed_dim: 8,
                ..EchelonConfig::default()
            },
            pattern_depth: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_parameter_count() {
        let cfg = ModelConfig::default();
        let per_gen = pattern::generation_param_count(128);
        assert_eq!(per_gen, 280_451);
        let count = |g| echelon::count_params(&cfg.echelon, g);
        assert_eq!(count(5), 4_725_007);
        assert_eq!(count(4) - count(3), per_gen);
        let student = EchelonConfig {
            attention_enabled: false,
            ..EchelonConfig::default()
        };
        assert!(echelon::count_params(&student, 5) < count(5));
    }

    #[test]
    fn init_matches_count_and_is_deterministic() {
        let cfg = tiny();
        let a = Model::new(cfg.clone(), 3).unwrap();
        assert_eq!(a.params.num_scalars(), cfg.num_params());
        assert_eq!(a, Model::new(cfg.clone(), 3).unwrap());
        assert_ne!(a.params, Model::new(cfg, 4).unwrap().params);
    }

    #[test]
    fn zero_depth_rejected() {
        let cfg = ModelConfig {
            pattern_depth: 0,
            ..tiny()
        };
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_and_row_sums() {
        use rand::SeedableRng;
        let model = Model::new(tiny(), 1).unwrap();
        let spec = EpisodeSpec::new(2, 1, 2).with_image_size(8, 8);
        let ep = synth_episode(&spec, &SynthParams::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let batch = model.prepare(&ep).unwrap();
        let mut g = Graph::new();
        let binds = model.params.bind(&mut g);
        let pass = model.forward(&mut g, &binds, &batch, &spec, true).unwrap();
        assert_eq!(pass.states.len(), 2);
        for st in &pass.states {
            for ch in 0..3 {
                let m = g.value(st.m[ch]);
                assert_eq!(m.shape(), &[6, 6]);
                for i in 0..6 {
                    let s: f64 = (0..6).map(|j| m[[i, j]]).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
                assert_eq!(g.shape(st.e[ch]), &[6, 8]);
            }
        }
        assert_eq!(pass.stats.len(), 12);
        assert_eq!(model.predict(&ep, &spec).unwrap().len(), 4);
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut model = Model::new(tiny(), 1).unwrap();
        let name = "echelon.ch0.stage1.norm";
        let stats = vec![(
            name.to_string(),
            crate::autograd::BatchStats {
                mean: vec![1.0; 4],
                var: vec![3.0; 4],
            },
        )];
        model.apply_batch_stats(&stats).unwrap();
        assert!((model.buffers.get(&format!("{name}.mean")).unwrap()[0] - 0.1).abs() < 1e-15);
        assert!((model.buffers.get(&format!("{name}.var")).unwrap()[0] - 1.2).abs() < 1e-15);
    }
}
