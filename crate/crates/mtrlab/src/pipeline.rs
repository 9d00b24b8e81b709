//! End-to-end glue: run the model over scenarios, select trajectories, and
//! assemble evaluation items and prediction records.

use crate::error::Result;
use crate::evaluation::{evaluate, DenseEvalItem, EvalItem, JointEvalItem, MetricReport};
use crate::intention::IntentionPointSet;
use crate::model::{MotionModel, PredictOutput};
use crate::objective::GtFuture;
use crate::postprocess::{
    combine_joint, e2e_select, nms_select, PredictionMode, PredictionRecord, PredictionSet,
    DEFAULT_NMS_THRESHOLD, DEFAULT_OUTPUT_COUNT,
};
use crate::scene::Scenario;
use serde::{Deserialize, Serialize};

/// How final trajectories are selected from the mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    Nms { out_count: usize, threshold: f64 },
    E2e,
}

impl Default for Selection {
    fn default() -> Self {
        Selection::Nms {
            out_count: DEFAULT_OUTPUT_COUNT,
            threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

/// Candidates from the final decoder layer of one prediction.
pub fn candidates_from(output: &PredictOutput, model_id: &str) -> Vec<PredictionMode> {
    let gmm = output.final_layer();
    (0..gmm.n_modes)
        .map(|k| PredictionMode {
            confidence: gmm.probs[k],
            trajectory: gmm.trajectory(k),
            model_id: model_id.to_string(),
            mode_index: k,
            suppressed: false,
        })
        .collect()
}

pub fn select(candidates: &[PredictionMode], selection: Selection) -> PredictionSet {
    match selection {
        Selection::Nms {
            out_count,
            threshold,
        } => nms_select(candidates, out_count, threshold),
        Selection::E2e => e2e_select(candidates),
    }
}

/// Everything produced for one scenario: marginal eval items per interested
/// agent, dense-future items from the first interested agent's pass, an
/// optional joint item for the first two interested agents, and world-frame
/// prediction records.
pub struct ScenarioOutput {
    pub items: Vec<EvalItem>,
    pub dense: Vec<DenseEvalItem>,
    pub joint: Option<JointEvalItem>,
    pub records: Vec<PredictionRecord>,
}

pub fn run_scenario(
    model: &MotionModel,
    scenario: &Scenario,
    intentions: &IntentionPointSet,
    selection: Selection,
    model_id: &str,
) -> Result<ScenarioOutput> {
    let mut items = Vec::new();
    let mut dense = Vec::new();
    let mut records = Vec::new();
    let mut marginal_sets: Vec<(PredictionSet, GtFuture)> = Vec::new();

    for (slot, &agent_id) in scenario.interested_ids.iter().enumerate() {
        let output = model.predict(scenario, agent_id, intentions)?;
        let candidates = candidates_from(&output, model_id);
        let set = select(&candidates, selection);

        // Ground truth in the same (agent-centric) frame as the prediction.
        let to_agent = output.to_world.inverse();
        let agent = &scenario.agents[agent_id];
        let gt = GtFuture {
            positions: agent.future.iter().map(|s| to_agent.apply(s.position)).collect(),
            valid: agent.future.iter().map(|s| s.valid).collect(),
        };
        if gt.endpoint().is_none() {
            continue;
        }

        // World-frame record for prediction files.
        let world_modes: Vec<PredictionMode> = set
            .modes
            .iter()
            .map(|m| PredictionMode {
                trajectory: m.trajectory.iter().map(|&p| output.to_world.apply(p)).collect(),
                ..m.clone()
            })
            .collect();
        records.push(PredictionRecord {
            agent_id,
            modes: world_modes,
            joint: None,
        });

        // Dense-future items come from the first interested agent's pass.
        if slot == 0 {
            if let Some(df) = &output.dense_future {
                let t = model.config.t_future;
                for (row, &ai) in output.valid_idx.iter().enumerate() {
                    let other = &scenario.agents[ai];
                    let gt_other = GtFuture {
                        positions: other
                            .future
                            .iter()
                            .map(|s| to_agent.apply(s.position))
                            .collect(),
                        valid: other.future.iter().map(|s| s.valid).collect(),
                    };
                    if gt_other.endpoint().is_none() {
                        continue;
                    }
                    let trajectory: Vec<[f64; 2]> = (0..t)
                        .map(|step| [df.get(row, step * 4), df.get(row, step * 4 + 1)])
                        .collect();
                    dense.push(DenseEvalItem {
                        category: other.category,
                        trajectory,
                        gt: gt_other,
                    });
                }
            }
        }

        marginal_sets.push((set.clone(), gt.clone()));
        items.push(EvalItem {
            category: agent.category,
            pred: set,
            gt,
        });
    }

    let joint = if marginal_sets.len() >= 2 {
        let (set_a, gt_a) = &marginal_sets[0];
        let (set_b, gt_b) = &marginal_sets[1];
        let joint_set = combine_joint(set_a, set_b, DEFAULT_OUTPUT_COUNT)?;
        if let Some(first) = records.first_mut() {
            first.joint = Some(joint_set.clone());
        }
        Some(JointEvalItem {
            category: scenario.agents[scenario.interested_ids[0]].category,
            pred: joint_set,
            gts: [gt_a.clone(), gt_b.clone()],
        })
    } else {
        None
    };

    Ok(ScenarioOutput {
        items,
        dense,
        joint,
        records,
    })
}

/// Evaluate a whole dataset and build the metric report.
pub fn evaluate_dataset(
    model: &MotionModel,
    scenarios: &[Scenario],
    intentions: &IntentionPointSet,
    selection: Selection,
    miss_threshold: f64,
) -> Result<MetricReport> {
    let mut items = Vec::new();
    let mut dense = Vec::new();
    let mut joint = Vec::new();
    for scenario in scenarios {
        let out = run_scenario(model, scenario, intentions, selection, "model")?;
        items.extend(out.items);
        dense.extend(out.dense);
        joint.extend(out.joint);
    }
    evaluate(&items, &dense, &joint, miss_threshold)
}
