//! Full model assembly: polyline encoders, context encoder, motion decoder,
//! and per-sample loss construction.

use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::decoder::{decode, LayerPrediction, MotionDecoder, QueryMode};
use crate::encoder::{encode_context, ContextEncoder, ContextFeatures};
use crate::error::{Error, Result};
use crate::intention::IntentionPointSet;
use crate::objective::{total_loss, AssignmentStrategy, DenseGt, GtFuture, LossReport};
use crate::polyline::{encode_polylines, PolylineEncoderPair};
use crate::scene::{
    agent_channel_count, build_polyline_batch, normalize_to_agent, AgentCategory, PolylineBatch,
    RigidTransform, Scenario, MAP_CHANNELS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryModeConfig {
    IntentionPoints,
    LatentLearnable,
}

impl From<QueryModeConfig> for QueryMode {
    fn from(v: QueryModeConfig) -> Self {
        match v {
            QueryModeConfig::IntentionPoints => QueryMode::IntentionPoints,
            QueryModeConfig::LatentLearnable => QueryMode::LatentLearnable,
        }
    }
}

/// Model dimensions and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Neighbors in the encoder's local self-attention.
    pub neighbor_k: usize,
    /// Motion query pairs per category.
    pub n_modes: usize,
    /// Map polylines collected along each mode's trajectory.
    pub map_collect: usize,
    pub t_history: usize,
    pub t_future: usize,
    pub max_map_polylines: usize,
    pub pts_per_polyline: usize,
    pub agent_hidden: usize,
    pub map_hidden: usize,
    pub dense_hidden: usize,
    pub future_hidden: usize,
    pub head_hidden: usize,
    pub use_dense_future: bool,
    pub local_refinement: bool,
    pub query_mode: QueryModeConfig,
}

impl ModelConfig {
    /// Desk-scale profile used by the test suite.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            neighbor_k: 8,
            n_modes: 8,
            map_collect: 8,
            t_history: 5,
            t_future: 16,
            max_map_polylines: 24,
            pts_per_polyline: 10,
            agent_hidden: 64,
            map_hidden: 16,
            dense_hidden: 128,
            future_hidden: 32,
            head_hidden: 128,
            use_dense_future: true,
            local_refinement: true,
            query_mode: QueryModeConfig::IntentionPoints,
        }
    }

    /// Reference dimensions matching the full-scale configuration. Reachable
    /// through config files but far too heavy for the test suite.
    pub fn paper() -> Self {
        Self {
            d_model: 256,
            n_heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            neighbor_k: 16,
            n_modes: 64,
            map_collect: 128,
            t_history: 11,
            t_future: 80,
            max_map_polylines: 768,
            pts_per_polyline: 20,
            agent_hidden: 256,
            map_hidden: 64,
            dense_hidden: 512,
            future_hidden: 256,
            head_hidden: 512,
            use_dense_future: true,
            local_refinement: true,
            query_mode: QueryModeConfig::IntentionPoints,
        }
    }

    /// Tiny dimensions for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            neighbor_k: 4,
            n_modes: 2,
            map_collect: 3,
            t_history: 3,
            t_future: 4,
            max_map_polylines: 6,
            pts_per_polyline: 5,
            agent_hidden: 8,
            map_hidden: 8,
            dense_hidden: 8,
            future_hidden: 8,
            head_hidden: 8,
            use_dense_future: true,
            local_refinement: true,
            query_mode: QueryModeConfig::IntentionPoints,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return Err(Error::config("d_model must be a positive multiple of 4"));
        }
        if self.d_model % self.n_heads != 0 || (2 * self.d_model) % self.n_heads != 0 {
            return Err(Error::config("head count must divide d_model and 2*d_model"));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::config("need at least one encoder and decoder layer"));
        }
        if self.n_modes == 0 {
            return Err(Error::config("need at least one motion query pair"));
        }
        if self.t_history == 0 || self.t_future == 0 {
            return Err(Error::config("history/future lengths must be positive"));
        }
        Ok(())
    }
}

/// One training/evaluation sample: a scenario normalized to one interested
/// agent, with its batch arrays and ground-truth targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub batch: PolylineBatch,
    pub category: AgentCategory,
    pub gt: GtFuture,
    pub dense_gt: DenseGt,
    pub agent_index: usize,
    pub to_world: RigidTransform,
}

/// Normalize `scenario` to `agent_id` and assemble arrays and targets.
pub fn prepare_sample(scenario: &Scenario, agent_id: usize, cfg: &ModelConfig) -> Result<Sample> {
    if scenario.history_len() != cfg.t_history || scenario.future_len() != cfg.t_future {
        return Err(Error::config(format!(
            "scenario has t={}/T={}, model expects t={}/T={}",
            scenario.history_len(),
            scenario.future_len(),
            cfg.t_history,
            cfg.t_future
        )));
    }
    let (normalized, to_world) = normalize_to_agent(scenario, agent_id)?;
    let batch = build_polyline_batch(&normalized, cfg.max_map_polylines, cfg.pts_per_polyline);

    let agent = &normalized.agents[agent_id];
    let gt = GtFuture {
        positions: agent.future.iter().map(|s| s.position).collect(),
        valid: agent.future.iter().map(|s| s.valid).collect(),
    };

    let valid_idx: Vec<usize> = (0..batch.n_agents).filter(|&i| batch.agent_valid[i]).collect();
    let t = cfg.t_future;
    let mut targets = Mat::zeros(valid_idx.len(), t * 4);
    let mut mask = Mat::zeros(valid_idx.len(), t * 4);
    let mut n_valid_steps = 0;
    for (row, &ai) in valid_idx.iter().enumerate() {
        for (step, s) in normalized.agents[ai].future.iter().enumerate() {
            if !s.valid {
                continue;
            }
            n_valid_steps += 1;
            targets.set(row, step * 4, s.position[0]);
            targets.set(row, step * 4 + 1, s.position[1]);
            targets.set(row, step * 4 + 2, s.velocity[0]);
            targets.set(row, step * 4 + 3, s.velocity[1]);
            for c in 0..4 {
                mask.set(row, step * 4 + c, 1.0);
            }
        }
    }

    Ok(Sample {
        batch,
        category: scenario.agents[agent_id].category,
        gt,
        dense_gt: DenseGt {
            targets,
            mask,
            n_valid_steps,
        },
        agent_index: agent_id,
        to_world,
    })
}

/// Expand a dataset into `(scenario, interested agent)` samples, skipping
/// agents whose ground-truth endpoint is invalid.
pub fn samples_from_scenarios(scenarios: &[Scenario], cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in scenarios {
        for &id in &s.interested_ids {
            let sample = prepare_sample(s, id, cfg)?;
            if sample.gt.endpoint().is_some() {
                out.push(sample);
            }
        }
    }
    Ok(out)
}

pub struct ModelForward {
    pub context: ContextFeatures,
    pub layers: Vec<LayerPrediction>,
}

/// Constant-velocity rollout of the interested agent (at the origin of the
/// agent-centric frame).
fn cv_rollout(sample: &Sample, t_future: usize) -> Vec<[f64; 2]> {
    let v = sample.batch.agent_last_velocity[sample.agent_index];
    let dt = sample.batch.frame_period;
    (0..t_future)
        .map(|t| [v[0] * dt * (t + 1) as f64, v[1] * dt * (t + 1) as f64])
        .collect()
}

/// Borrowed view of everything but the parameter store.
///
/// Finite-difference probes mutate the store while re-running the forward
/// pass, so the forward logic lives here, on field-level borrows that stay
/// disjoint from `MotionModel::store`.
#[derive(Clone, Copy)]
pub struct ModelParts<'a> {
    pub config: &'a ModelConfig,
    pub polyline_encoders: &'a PolylineEncoderPair,
    pub context_encoder: &'a ContextEncoder,
    pub decoder: &'a MotionDecoder,
}

impl<'a> ModelParts<'a> {
    fn anchors(&self, intentions: &IntentionPointSet, cat: AgentCategory) -> Result<Vec<[f64; 2]>> {
        match self.decoder.query_mode {
            QueryMode::IntentionPoints => Ok(intentions.category_points(cat)?.clone()),
            QueryMode::LatentLearnable => Ok(Vec::new()),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        sample: &Sample,
        intentions: &IntentionPointSet,
    ) -> Result<ModelForward> {
        let tokens = encode_polylines(g, &sample.batch, self.polyline_encoders)?;
        let context = encode_context(
            g,
            &tokens,
            &sample.batch,
            self.context_encoder,
            self.config.use_dense_future,
        )?;
        let anchors = self.anchors(intentions, sample.category)?;
        let rollout = cv_rollout(sample, self.config.t_future);
        let layers = decode(
            g,
            &context,
            &anchors,
            self.decoder,
            sample.category.index(),
            &rollout,
        )?;
        Ok(ModelForward { context, layers })
    }

    pub fn loss(
        &self,
        g: &mut Graph,
        sample: &Sample,
        intentions: &IntentionPointSet,
        strategy: AssignmentStrategy,
    ) -> Result<(Var, LossReport, ModelForward)> {
        let fwd = self.forward(g, sample, intentions)?;
        let anchors = self.anchors(intentions, sample.category)?;
        let (loss, report) = total_loss(
            g,
            &fwd.layers,
            fwd.context.dense_future,
            if self.config.use_dense_future {
                Some(&sample.dense_gt)
            } else {
                None
            },
            &sample.gt,
            strategy,
            &anchors,
        )?;
        Ok((loss, report, fwd))
    }
}

/// The complete motion prediction model. Parameters live in `store`; the
/// layer structs hold ids into it.
pub struct MotionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub polyline_encoders: PolylineEncoderPair,
    pub context_encoder: ContextEncoder,
    pub decoder: MotionDecoder,
}

impl MotionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let polyline_encoders = PolylineEncoderPair::register(
            &mut store,
            &mut rng,
            "poly",
            agent_channel_count(config.t_history),
            MAP_CHANNELS,
            config.agent_hidden,
            config.map_hidden,
            config.d_model,
        );
        let context_encoder = ContextEncoder::register(
            &mut store,
            &mut rng,
            "ctx",
            config.d_model,
            config.n_heads,
            config.encoder_layers,
            config.neighbor_k,
            config.dense_hidden,
            config.future_hidden,
            config.t_future,
        );
        let mut decoder = MotionDecoder::register(
            &mut store,
            &mut rng,
            "dec",
            config.d_model,
            config.n_heads,
            config.decoder_layers,
            config.n_modes,
            config.t_future,
            config.map_collect,
            config.head_hidden,
        );
        decoder.query_mode = config.query_mode.into();
        decoder.local_refinement = config.local_refinement;
        Ok(Self {
            config,
            store,
            polyline_encoders,
            context_encoder,
            decoder,
        })
    }

    /// Borrowed view over everything except the parameter store.
    pub fn parts(&self) -> ModelParts<'_> {
        ModelParts {
            config: &self.config,
            polyline_encoders: &self.polyline_encoders,
            context_encoder: &self.context_encoder,
            decoder: &self.decoder,
        }
    }

    /// Forward pass for one sample on an existing graph.
    pub fn forward(
        &self,
        g: &mut Graph,
        sample: &Sample,
        intentions: &IntentionPointSet,
    ) -> Result<ModelForward> {
        self.parts().forward(g, sample, intentions)
    }

    /// Forward plus loss; used by the trainer and the gradient checker.
    pub fn loss(
        &self,
        g: &mut Graph,
        sample: &Sample,
        intentions: &IntentionPointSet,
        strategy: AssignmentStrategy,
    ) -> Result<(Var, LossReport, ModelForward)> {
        self.parts().loss(g, sample, intentions, strategy)
    }

    /// Inference: per-layer mixtures for one interested agent.
    pub fn predict(
        &self,
        scenario: &Scenario,
        agent_id: usize,
        intentions: &IntentionPointSet,
    ) -> Result<PredictOutput> {
        let sample = prepare_sample(scenario, agent_id, &self.config)?;
        let mut g = Graph::new(&self.store);
        let fwd = self.forward(&mut g, &sample, intentions)?;
        let dense_future = fwd.context.dense_future.map(|v| g.value(v).clone());
        Ok(PredictOutput {
            layers: fwd.layers.into_iter().map(|l| l.gmm).collect(),
            dense_future,
            valid_idx: fwd.context.valid_idx,
            to_world: sample.to_world,
            category: sample.category,
        })
    }
}

/// Extracted inference output for one interested agent.
pub struct PredictOutput {
    pub layers: Vec<crate::decoder::GmmPrediction>,
    /// `[n_valid, t_future * 4]` dense single-trajectory forecasts for all
    /// valid agents, in the interested agent's frame.
    pub dense_future: Option<Mat>,
    pub valid_idx: Vec<usize>,
    pub to_world: RigidTransform,
    pub category: AgentCategory,
}

impl PredictOutput {
    pub fn final_layer(&self) -> &crate::decoder::GmmPrediction {
        self.layers.last().expect("decoder has at least one layer")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, grad_agreement_error};
    use crate::generator::{generate_synthetic_scenario, GeneratorConfig};
    use crate::intention::{collect_endpoints, fit_intention_points};
    use approx::assert_abs_diff_eq;

    fn desk_fixture(seed: u64, cfg: &ModelConfig) -> (Vec<Scenario>, IntentionPointSet) {
        let gen_cfg = GeneratorConfig {
            t_history: cfg.t_history,
            t_future: cfg.t_future,
            n_agents: 4,
            ..Default::default()
        };
        let scenarios: Vec<Scenario> = (0..24)
            .map(|i| generate_synthetic_scenario(seed * 1000 + i, &gen_cfg).unwrap())
            .collect();
        let endpoints = collect_endpoints(&scenarios).unwrap();
        let intentions =
            fit_intention_points(&endpoints, cfg.n_modes, seed, "test".into()).unwrap();
        (scenarios, intentions)
    }

    #[test]
    fn forward_shapes_and_simplex() {
        let cfg = ModelConfig::desk();
        let model = MotionModel::new(cfg.clone(), 7).unwrap();
        let (scenarios, intentions) = desk_fixture(1, &cfg);
        let sample = prepare_sample(&scenarios[0], 0, &cfg).unwrap();
        let mut g = Graph::new(&model.store);
        let fwd = model.forward(&mut g, &sample, &intentions).unwrap();
        assert_eq!(fwd.layers.len(), cfg.decoder_layers);
        for layer in &fwd.layers {
            assert_eq!(layer.gmm.n_modes, cfg.n_modes);
            assert_eq!(layer.gmm.t_future, cfg.t_future);
            let sum: f64 = layer.gmm.probs.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn mode_permutation_equivariance() {
        let cfg = ModelConfig {
            n_modes: 4,
            ..ModelConfig::desk()
        };
        let model = MotionModel::new(cfg.clone(), 9).unwrap();
        let (scenarios, intentions) = desk_fixture(2, &cfg);
        let sample = prepare_sample(&scenarios[1], 0, &cfg).unwrap();

        let mut g = Graph::new(&model.store);
        let fwd = model.forward(&mut g, &sample, &intentions).unwrap();
        let base = fwd.layers.last().unwrap();

        // Reverse the intention points of the sample's category.
        let mut permuted = intentions.clone();
        let pts = permuted.points.get_mut(&sample.category).unwrap();
        pts.reverse();
        let mut g2 = Graph::new(&model.store);
        let fwd2 = model.forward(&mut g2, &sample, &permuted).unwrap();
        let perm = fwd2.layers.last().unwrap();

        let k = cfg.n_modes;
        for mode in 0..k {
            let other = k - 1 - mode;
            assert_abs_diff_eq!(base.gmm.probs[mode], perm.gmm.probs[other], epsilon = 1e-9);
            for step in [0, cfg.t_future - 1] {
                let a = base.gmm.mean(mode, step);
                let b = perm.gmm.mean(other, step);
                assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-9);
                assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn searching_query_tracks_endpoints_while_intention_query_stays() {
        // Perturbing a layer's predicted endpoints must change the next
        // searching query but never the static intention query.
        let cfg = ModelConfig::tiny();
        let model = MotionModel::new(cfg.clone(), 11).unwrap();
        let queries = &model.decoder.queries[0];
        let store = &model.store;

        let embed = |endpoints: &[[f64; 2]]| -> (Mat, Mat) {
            let mut g = Graph::new(store);
            let pe = g.constant(crate::polyline::sinusoidal_pe(endpoints, cfg.d_model).unwrap());
            let qs = queries.search_embed.apply(&mut g, pe);
            let pe_i = g.constant(
                crate::polyline::sinusoidal_pe(&[[1.0, 1.0], [2.0, 2.0]], cfg.d_model).unwrap(),
            );
            let qi = queries.intention_embed.apply(&mut g, pe_i);
            (g.value(qs).clone(), g.value(qi).clone())
        };
        let (qs_a, qi_a) = embed(&[[0.0, 0.0], [1.0, 0.0]]);
        let (qs_b, qi_b) = embed(&[[0.5, 0.2], [1.0, 0.0]]);
        assert_eq!(qi_a, qi_b);
        assert!(qs_a.row(0).iter().zip(qs_b.row(0)).any(|(a, b)| (a - b).abs() > 1e-9));
        // Unperturbed mode unchanged.
        for (a, b) in qs_a.row(1).iter().zip(qs_b.row(1)) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let cfg = ModelConfig::tiny();
        let mut model = MotionModel::new(cfg.clone(), 13).unwrap();
        let gen_cfg = GeneratorConfig {
            t_history: cfg.t_history,
            t_future: cfg.t_future,
            n_agents: 3,
            ..Default::default()
        };
        let scenarios: Vec<Scenario> = (0..8)
            .map(|i| generate_synthetic_scenario(100 + i, &gen_cfg).unwrap())
            .collect();
        let endpoints = collect_endpoints(&scenarios).unwrap();
        let intentions =
            fit_intention_points(&endpoints, cfg.n_modes, 5, "test".into()).unwrap();
        let sample = prepare_sample(&scenarios[0], 0, &cfg).unwrap();

        let parts = ModelParts {
            config: &model.config,
            polyline_encoders: &model.polyline_encoders,
            context_encoder: &model.context_encoder,
            decoder: &model.decoder,
        };
        let grads = {
            let mut g = Graph::new(&model.store);
            let (loss, _, _) = parts
                .loss(&mut g, &sample, &intentions, AssignmentStrategy::AlphaIntentionPoint)
                .unwrap();
            g.backward(loss)
        };

        let n = model.store.scalar_count();
        let mut max_err: f64 = 0.0;
        // Deterministic stride over all parameters.
        let step = (n / 400).max(1);
        for flat in (0..n).step_by(step) {
            let analytic = grads.flat_get(&model.store, flat);
            let numeric = central_difference(&mut model.store, flat, 1e-5, |s| {
                let mut g = Graph::new(s);
                let (loss, _, _) = parts
                    .loss(&mut g, &sample, &intentions, AssignmentStrategy::AlphaIntentionPoint)
                    .unwrap();
                g.value(loss).item()
            });
            max_err = max_err.max(grad_agreement_error(analytic, numeric));
        }
        assert!(max_err < 1e-4, "full-model max rel error {max_err}");
    }
}
