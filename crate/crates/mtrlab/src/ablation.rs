//! Ablation harness: trains model variants on freshly generated synthetic
//! splits and reports directional comparisons (query type, dense future,
//! assignment strategy, intention-point distribution, attention locality).

use crate::error::Result;
use crate::evaluation::MetricReport;
use crate::generator::{generate_synthetic_scenario, GeneratorConfig, LaneTemplate};
use crate::intention::{collect_endpoints, fit_intention_points, uniform_grid_points, IntentionPointSet};
use crate::model::{samples_from_scenarios, ModelConfig, QueryModeConfig};
use crate::objective::AssignmentStrategy;
use crate::pipeline::{evaluate_dataset, Selection};
use crate::scene::{AgentCategory, Scenario};
use crate::trainer::{TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_eval: usize,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub gen: GeneratorConfig,
    pub miss_threshold: f64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        let model = ModelConfig {
            d_model: 32,
            n_heads: 2,
            agent_hidden: 32,
            map_hidden: 16,
            dense_hidden: 64,
            future_hidden: 32,
            head_hidden: 64,
            ..ModelConfig::desk()
        };
        let gen = GeneratorConfig {
            template: LaneTemplate::Intersection {
                arms: 4,
                branch_probs: vec![0.4, 0.3, 0.3],
            },
            n_agents: 5,
            leader: true,
            t_history: model.t_history,
            t_future: model.t_future,
            ..Default::default()
        };
        Self {
            seeds: vec![11, 12, 13],
            n_train: 48,
            n_eval: 32,
            steps: 280,
            lr: 3e-3,
            batch_size: 8,
            model,
            gen,
            miss_threshold: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntentionSource {
    KMeans,
    UniformGrid,
}

/// One variant to train and evaluate.
#[derive(Clone, Debug)]
pub struct VariantSpec {
    pub label: String,
    pub model: ModelConfig,
    pub strategy: AssignmentStrategy,
    pub intention_source: IntentionSource,
}

/// Seed-aggregated results of one variant.
#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub label: String,
    pub mean_map: f64,
    pub mean_miss_rate: f64,
    pub mean_min_ade: f64,
    pub mean_min_fde: f64,
    pub per_seed_map: Vec<f64>,
    pub per_seed_miss_rate: Vec<f64>,
}

impl VariantSummary {
    fn from_reports(label: &str, reports: &[MetricReport]) -> Self {
        let n = reports.len() as f64;
        Self {
            label: label.to_string(),
            mean_map: reports.iter().map(|r| r.average.map).sum::<f64>() / n,
            mean_miss_rate: reports.iter().map(|r| r.average.miss_rate).sum::<f64>() / n,
            mean_min_ade: reports.iter().map(|r| r.average.min_ade).sum::<f64>() / n,
            mean_min_fde: reports.iter().map(|r| r.average.min_fde).sum::<f64>() / n,
            per_seed_map: reports.iter().map(|r| r.average.map).collect(),
            per_seed_miss_rate: reports.iter().map(|r| r.average.miss_rate).collect(),
        }
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:<28} mAP {:.4}  miss {:.4}  minADE {:.4}  minFDE {:.4}",
            self.label, self.mean_map, self.mean_miss_rate, self.mean_min_ade, self.mean_min_fde
        )
    }
}

fn dataset(settings: &AblationSettings, seed: u64) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
    let train = (0..settings.n_train)
        .map(|i| generate_synthetic_scenario(seed * 100_000 + i as u64, &settings.gen))
        .collect::<Result<Vec<_>>>()?;
    let eval = (0..settings.n_eval)
        .map(|i| generate_synthetic_scenario(seed * 100_000 + 50_000 + i as u64, &settings.gen))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, eval))
}

fn intentions_for(
    source: IntentionSource,
    train: &[Scenario],
    k: usize,
    seed: u64,
) -> Result<IntentionPointSet> {
    let endpoints = collect_endpoints(train)?;
    match source {
        IntentionSource::KMeans => fit_intention_points(&endpoints, k, seed, "ablation".into()),
        IntentionSource::UniformGrid => {
            // Grid over the bounding box of all training endpoints.
            let mut min = [f64::INFINITY; 2];
            let mut max = [f64::NEG_INFINITY; 2];
            for eps in endpoints.values() {
                for p in eps {
                    for c in 0..2 {
                        min[c] = min[c].min(p[c]);
                        max[c] = max[c].max(p[c]);
                    }
                }
            }
            let cats: Vec<AgentCategory> = endpoints.keys().copied().collect();
            uniform_grid_points(min, max, k, &cats)
        }
    }
}

/// Train one variant on one seed and evaluate on the held-out split.
pub fn run_variant(
    settings: &AblationSettings,
    spec: &VariantSpec,
    seed: u64,
) -> Result<MetricReport> {
    let (train_scenarios, eval_scenarios) = dataset(settings, seed)?;
    let intentions = intentions_for(spec.intention_source, &train_scenarios, spec.model.n_modes, seed)?;
    let samples = samples_from_scenarios(&train_scenarios, &spec.model)?;
    let cfg = TrainConfig {
        lr: settings.lr,
        batch_size: settings.batch_size,
        epochs: usize::MAX >> 1,
        weight_decay: 0.01,
        seed,
        strategy: spec.strategy,
        model: spec.model.clone(),
        max_steps: Some(settings.steps),
        // One schedule epoch spans the whole run: short ablation runs must
        // not walk into the epoch-20 decay regime.
        epoch_length: Some(settings.steps as usize),
    };
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(&samples, &intentions, |_| {})?;
    let selection = if spec.model.n_modes <= 6 {
        Selection::E2e
    } else {
        Selection::default()
    };
    evaluate_dataset(
        &trainer.model,
        &eval_scenarios,
        &intentions,
        selection,
        settings.miss_threshold,
    )
}

pub fn run_variant_across_seeds(
    settings: &AblationSettings,
    spec: &VariantSpec,
) -> Result<VariantSummary> {
    let reports = settings
        .seeds
        .iter()
        .map(|&seed| run_variant(settings, spec, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(VariantSummary::from_reports(&spec.label, &reports))
}

/// Static intention queries vs free latent query embeddings
/// (single decoder layer, no local refinement, no dense future).
pub fn sweep_queries(settings: &AblationSettings) -> Result<Vec<VariantSummary>> {
    let base = ModelConfig {
        decoder_layers: 1,
        local_refinement: false,
        use_dense_future: false,
        ..settings.model.clone()
    };
    let intention = VariantSpec {
        label: "static intention query".into(),
        model: ModelConfig {
            query_mode: QueryModeConfig::IntentionPoints,
            ..base.clone()
        },
        strategy: AssignmentStrategy::AlphaIntentionPoint,
        intention_source: IntentionSource::KMeans,
    };
    let latent = VariantSpec {
        label: "latent learnable embedding".into(),
        model: ModelConfig {
            query_mode: QueryModeConfig::LatentLearnable,
            ..base
        },
        strategy: AssignmentStrategy::BetaPredictedTrajectory,
        intention_source: IntentionSource::KMeans,
    };
    Ok(vec![
        run_variant_across_seeds(settings, &intention)?,
        run_variant_across_seeds(settings, &latent)?,
    ])
}

/// Dense future prediction enabled vs disabled.
pub fn sweep_dense_future(settings: &AblationSettings) -> Result<Vec<VariantSummary>> {
    let on = VariantSpec {
        label: "dense future on".into(),
        model: ModelConfig {
            use_dense_future: true,
            ..settings.model.clone()
        },
        strategy: AssignmentStrategy::AlphaIntentionPoint,
        intention_source: IntentionSource::KMeans,
    };
    let off = VariantSpec {
        label: "dense future off".into(),
        model: ModelConfig {
            use_dense_future: false,
            ..settings.model.clone()
        },
        strategy: AssignmentStrategy::AlphaIntentionPoint,
        intention_source: IntentionSource::KMeans,
    };
    Ok(vec![
        run_variant_across_seeds(settings, &on)?,
        run_variant_across_seeds(settings, &off)?,
    ])
}

/// Assignment strategy comparison at two mode counts.
pub fn sweep_assignment(
    settings: &AblationSettings,
    k_large: usize,
    k_small: usize,
) -> Result<Vec<VariantSummary>> {
    let mut out = Vec::new();
    for (k, strategy, label) in [
        (k_large, AssignmentStrategy::AlphaIntentionPoint, format!("alpha K={k_large}")),
        (k_large, AssignmentStrategy::BetaPredictedTrajectory, format!("beta K={k_large}")),
        (k_small, AssignmentStrategy::AlphaIntentionPoint, format!("alpha K={k_small}")),
        (k_small, AssignmentStrategy::BetaPredictedTrajectory, format!("beta K={k_small}")),
    ] {
        let spec = VariantSpec {
            label,
            model: ModelConfig {
                n_modes: k,
                ..settings.model.clone()
            },
            strategy,
            intention_source: IntentionSource::KMeans,
        };
        out.push(run_variant_across_seeds(settings, &spec)?);
    }
    Ok(out)
}

/// k-means intention points vs a uniform grid over the endpoint range.
pub fn sweep_intention_distribution(settings: &AblationSettings) -> Result<Vec<VariantSummary>> {
    // The grid baseline needs a perfect-square mode count.
    let side = (settings.model.n_modes as f64).sqrt().ceil() as usize;
    let model = ModelConfig {
        n_modes: side * side,
        ..settings.model.clone()
    };
    let kmeans = VariantSpec {
        label: "k-means intention points".into(),
        model: model.clone(),
        strategy: AssignmentStrategy::AlphaIntentionPoint,
        intention_source: IntentionSource::KMeans,
    };
    let grid = VariantSpec {
        label: "uniform grid points".into(),
        model,
        strategy: AssignmentStrategy::AlphaIntentionPoint,
        intention_source: IntentionSource::UniformGrid,
    };
    Ok(vec![
        run_variant_across_seeds(settings, &kmeans)?,
        run_variant_across_seeds(settings, &grid)?,
    ])
}

/// Cost/accuracy row for the attention-locality table.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionRow {
    pub label: String,
    pub neighbor_k: usize,
    /// Query-key pairs evaluated per encoder layer on a reference scenario.
    pub pairs_per_layer: u64,
    pub map: f64,
    pub min_ade: f64,
}

/// Local attention at several neighbor counts vs global attention
/// (neighbor count = token count). Single seed; reports the per-layer
/// query-key pair cost alongside accuracy.
pub fn sweep_attention(settings: &AblationSettings, ks: &[usize]) -> Result<Vec<AttentionRow>> {
    let seed = settings.seeds[0];
    let mut rows = Vec::new();
    for &k in ks {
        let spec = VariantSpec {
            label: if k == usize::MAX {
                "global".to_string()
            } else {
                format!("local k={k}")
            },
            model: ModelConfig {
                neighbor_k: if k == usize::MAX { 4096 } else { k },
                ..settings.model.clone()
            },
            strategy: AssignmentStrategy::AlphaIntentionPoint,
            intention_source: IntentionSource::KMeans,
        };
        let report = run_variant(settings, &spec, seed)?;

        // Measure the attention cost on a reference scenario.
        let (train, _) = dataset(settings, seed)?;
        let intentions = intentions_for(IntentionSource::KMeans, &train, spec.model.n_modes, seed)?;
        let model = crate::model::MotionModel::new(spec.model.clone(), seed)?;
        let sample = crate::model::prepare_sample(&train[0], 0, &spec.model)?;
        let mut g = crate::autodiff::Graph::new(&model.store);
        let fwd = model.forward(&mut g, &sample, &intentions)?;
        rows.push(AttentionRow {
            label: spec.label,
            neighbor_k: spec.model.neighbor_k,
            pairs_per_layer: fwd.context.pairs_per_layer[0],
            map: report.average.map,
            min_ade: report.average.min_ade,
        });
    }
    Ok(rows)
}
