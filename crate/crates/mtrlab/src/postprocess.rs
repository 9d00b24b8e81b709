//! Trajectory selection and combination: endpoint NMS, the no-NMS e2e path,
//! marginal-to-joint combination, and multi-model ensemble merging.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_OUTPUT_COUNT: usize = 6;
pub const DEFAULT_NMS_THRESHOLD: f64 = 2.5;

/// One candidate trajectory with its confidence and provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMode {
    pub confidence: f64,
    /// `t_future` positions.
    pub trajectory: Vec<[f64; 2]>,
    /// Which model produced this mode (for ensembles).
    #[serde(default)]
    pub model_id: String,
    /// Mode index in the producing model's output.
    #[serde(default)]
    pub mode_index: usize,
    /// True when this mode was suppressed by NMS and re-added as backfill.
    #[serde(default)]
    pub suppressed: bool,
}

impl PredictionMode {
    pub fn endpoint(&self) -> [f64; 2] {
        *self.trajectory.last().expect("trajectory is never empty")
    }
}

/// Final selected trajectories, confidences sorted descending.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub modes: Vec<PredictionMode>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn confidence_sum(&self) -> f64 {
        self.modes.iter().map(|m| m.confidence).sum()
    }

    fn normalized(&self) -> PredictionSet {
        let sum = self.confidence_sum();
        let mut out = self.clone();
        if sum > 0.0 {
            for m in &mut out.modes {
                m.confidence /= sum;
            }
        }
        out
    }
}

/// A joint mode for a pair of agents; confidence is the product of the two
/// marginal confidences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMode {
    pub confidence: f64,
    pub trajectories: [Vec<[f64; 2]>; 2],
    /// Indices into the two source prediction sets.
    pub source: (usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointPredictionSet {
    pub modes: Vec<JointMode>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Greedy endpoint NMS.
///
/// Candidates are visited in descending confidence; one is accepted iff its
/// endpoint lies strictly more than `threshold` from every accepted
/// endpoint. If fewer than `out_count` survive, the highest-confidence
/// suppressed candidates are appended with the `suppressed` flag so
/// downstream metrics always see a full set. The result is sorted by
/// descending confidence.
pub fn nms_select(candidates: &[PredictionMode], out_count: usize, threshold: f64) -> PredictionSet {
    nms_with_backfill(candidates, out_count, threshold, true)
}

fn nms_with_backfill(
    candidates: &[PredictionMode],
    out_count: usize,
    threshold: f64,
    backfill: bool,
) -> PredictionSet {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .confidence
            .partial_cmp(&candidates[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut accepted: Vec<usize> = Vec::new();
    let mut rejected: Vec<usize> = Vec::new();
    for &i in &order {
        if accepted.len() >= out_count {
            break;
        }
        let ep = candidates[i].endpoint();
        let clear = accepted
            .iter()
            .all(|&a| dist(candidates[a].endpoint(), ep) > threshold);
        if clear {
            accepted.push(i);
        } else {
            rejected.push(i);
        }
    }

    let mut modes: Vec<PredictionMode> = accepted
        .iter()
        .map(|&i| PredictionMode {
            suppressed: false,
            ..candidates[i].clone()
        })
        .collect();
    if backfill {
        for &i in &rejected {
            if modes.len() >= out_count {
                break;
            }
            modes.push(PredictionMode {
                suppressed: true,
                ..candidates[i].clone()
            });
        }
    }
    modes.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    PredictionSet { modes }
}

/// Pass-through selection for the e2e variant: sort by confidence and
/// renormalize the confidences to sum one.
pub fn e2e_select(candidates: &[PredictionMode]) -> PredictionSet {
    let mut modes = candidates.to_vec();
    modes.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let set = PredictionSet { modes };
    set.normalized()
}

/// Score all pairwise combinations of two marginal sets by confidence
/// product and keep the best `out_count`. Ties resolve lexicographically on
/// the source indices.
pub fn combine_joint(
    a: &PredictionSet,
    b: &PredictionSet,
    out_count: usize,
) -> Result<JointPredictionSet> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("joint combination needs non-empty marginal sets"));
    }
    let mut combos: Vec<JointMode> = Vec::with_capacity(a.len() * b.len());
    for (i, ma) in a.modes.iter().enumerate() {
        for (j, mb) in b.modes.iter().enumerate() {
            combos.push(JointMode {
                confidence: ma.confidence * mb.confidence,
                trajectories: [ma.trajectory.clone(), mb.trajectory.clone()],
                source: (i, j),
            });
        }
    }
    combos.sort_by(|x, y| {
        y.confidence
            .partial_cmp(&x.confidence)
            .unwrap()
            .then(x.source.cmp(&y.source))
    });
    combos.truncate(out_count);
    Ok(JointPredictionSet { modes: combos })
}

/// Merge several models' prediction sets: normalize each set's confidences,
/// weight by the number of contributing sets, pool, run NMS, and renormalize
/// the survivors.
pub fn ensemble_merge(
    sets: &[PredictionSet],
    out_count: usize,
    threshold: f64,
) -> PredictionSet {
    let non_empty: Vec<&PredictionSet> = sets.iter().filter(|s| !s.is_empty()).collect();
    if non_empty.is_empty() {
        return PredictionSet::default();
    }
    let w = 1.0 / non_empty.len() as f64;
    let mut pool = Vec::new();
    for set in non_empty {
        let normalized = set.normalized();
        for m in normalized.modes {
            pool.push(PredictionMode {
                confidence: m.confidence * w,
                ..m
            });
        }
    }
    // No backfill here: merged duplicates must stay suppressed.
    nms_with_backfill(&pool, out_count, threshold, false).normalized()
}

/// Prediction file payload for one interested agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub agent_id: usize,
    pub modes: Vec<PredictionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointPredictionSet>,
}

pub fn write_prediction(record: &PredictionRecord, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(record).expect("prediction serialization");
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_prediction(path: &Path) -> Result<PredictionRecord> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mode(conf: f64, endpoint: [f64; 2]) -> PredictionMode {
        PredictionMode {
            confidence: conf,
            trajectory: vec![[0.0, 0.0], endpoint],
            model_id: "m".into(),
            mode_index: 0,
            suppressed: false,
        }
    }

    #[test]
    fn nms_keeps_separated_endpoints() {
        let cands = vec![
            mode(0.9, [0.0, 0.0]),
            mode(0.8, [1.0, 0.0]),
            mode(0.7, [5.0, 0.0]),
        ];
        let out = nms_select(&cands, 2, 2.5);
        assert_eq!(out.modes.len(), 2);
        assert_abs_diff_eq!(out.modes[0].confidence, 0.9);
        assert_eq!(out.modes[0].endpoint(), [0.0, 0.0]);
        assert_abs_diff_eq!(out.modes[1].confidence, 0.7);
        assert_eq!(out.modes[1].endpoint(), [5.0, 0.0]);
    }

    #[test]
    fn nms_with_all_separated_is_topk() {
        let cands: Vec<PredictionMode> = (0..8)
            .map(|i| mode(0.1 * (i + 1) as f64, [10.0 * i as f64, 0.0]))
            .collect();
        let out = nms_select(&cands, 6, 2.5);
        assert_eq!(out.modes.len(), 6);
        for w in out.modes.windows(2) {
            assert!(w[0].confidence >= w[1].confidence);
        }
        assert_abs_diff_eq!(out.modes[0].confidence, 0.8);
    }

    #[test]
    fn nms_is_idempotent() {
        let cands = vec![
            mode(0.5, [0.0, 0.0]),
            mode(0.4, [1.0, 0.0]),
            mode(0.3, [6.0, 0.0]),
            mode(0.2, [12.0, 0.0]),
        ];
        let once = nms_select(&cands, 6, 2.5);
        let twice = nms_select(&once.modes, 6, 2.5);
        assert_eq!(once, twice);
    }

    #[test]
    fn nms_backfills_with_flag() {
        let cands = vec![
            mode(0.5, [0.0, 0.0]),
            mode(0.4, [0.5, 0.0]),
            mode(0.3, [1.0, 0.0]),
        ];
        let out = nms_select(&cands, 3, 2.5);
        assert_eq!(out.modes.len(), 3);
        assert!(!out.modes[0].suppressed);
        assert!(out.modes[1].suppressed);
        assert!(out.modes[2].suppressed);
        // Survivors (non-suppressed) are pairwise separated.
        let survivors: Vec<_> = out.modes.iter().filter(|m| !m.suppressed).collect();
        for i in 0..survivors.len() {
            for j in i + 1..survivors.len() {
                assert!(dist(survivors[i].endpoint(), survivors[j].endpoint()) > 2.5);
            }
        }
    }

    #[test]
    fn e2e_select_sorts_renormalizes_and_keeps_provenance() {
        let mut cands: Vec<PredictionMode> = (0..6)
            .map(|i| {
                let mut m = mode(0.1 * (i + 1) as f64, [i as f64, 0.0]);
                m.mode_index = i;
                m
            })
            .collect();
        cands.reverse();
        let out = e2e_select(&cands);
        assert_eq!(out.modes.len(), 6);
        assert_abs_diff_eq!(out.confidence_sum(), 1.0, epsilon = 1e-12);
        assert_eq!(out.modes[0].mode_index, 5);
        for w in out.modes.windows(2) {
            assert!(w[0].confidence >= w[1].confidence);
        }
    }

    #[test]
    fn combine_joint_matches_hand_enumeration() {
        let a = PredictionSet {
            modes: vec![mode(0.6, [0.0, 0.0]), mode(0.4, [5.0, 0.0])],
        };
        let b = PredictionSet {
            modes: vec![mode(0.7, [0.0, 5.0]), mode(0.3, [5.0, 5.0])],
        };
        let joint = combine_joint(&a, &b, 6).unwrap();
        let scores: Vec<f64> = joint.modes.iter().map(|m| m.confidence).collect();
        assert_eq!(scores.len(), 4);
        assert_abs_diff_eq!(scores[0], 0.42, epsilon = 1e-12);
        assert_abs_diff_eq!(scores[1], 0.28, epsilon = 1e-12);
        assert_abs_diff_eq!(scores[2], 0.18, epsilon = 1e-12);
        assert_abs_diff_eq!(scores[3], 0.12, epsilon = 1e-12);
    }

    #[test]
    fn combine_joint_uniform_ties_are_lexicographic() {
        let a = PredictionSet {
            modes: vec![mode(0.5, [0.0, 0.0]), mode(0.5, [1.0, 0.0])],
        };
        let b = a.clone();
        let joint = combine_joint(&a, &b, 6).unwrap();
        let sources: Vec<(usize, usize)> = joint.modes.iter().map(|m| m.source).collect();
        assert_eq!(sources, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn combine_joint_six_by_six_returns_six() {
        let mk = |n: usize| PredictionSet {
            modes: (0..n)
                .map(|i| mode(1.0 / n as f64, [i as f64 * 10.0, 0.0]))
                .collect(),
        };
        let joint = combine_joint(&mk(6), &mk(6), 6).unwrap();
        assert_eq!(joint.modes.len(), 6);
    }

    #[test]
    fn ensemble_merge_with_itself_is_identity() {
        let set = e2e_select(&[
            mode(0.5, [0.0, 0.0]),
            mode(0.3, [10.0, 0.0]),
            mode(0.2, [20.0, 0.0]),
        ]);
        let merged = ensemble_merge(&[set.clone(), set.clone()], 6, 2.5);
        assert_eq!(merged.modes.len(), set.modes.len());
        for (a, b) in merged.modes.iter().zip(&set.modes) {
            assert_abs_diff_eq!(a.confidence, b.confidence, epsilon = 1e-12);
            assert_eq!(a.trajectory, b.trajectory);
        }
    }

    #[test]
    fn ensemble_merge_with_empty_set_keeps_first() {
        let set = e2e_select(&[mode(0.6, [0.0, 0.0]), mode(0.4, [10.0, 0.0])]);
        let merged = ensemble_merge(&[set.clone(), PredictionSet::default()], 6, 2.5);
        assert_eq!(merged, set);
    }

    #[test]
    fn ensemble_merge_disjoint_pools_top_k() {
        let a = e2e_select(&[mode(0.9, [0.0, 0.0]), mode(0.1, [10.0, 0.0])]);
        let b = e2e_select(&[mode(0.8, [20.0, 0.0]), mode(0.2, [30.0, 0.0])]);
        let merged = ensemble_merge(&[a, b], 3, 2.5);
        assert_eq!(merged.modes.len(), 3);
        // Pooled ranking: 0.45, 0.40, 0.10, 0.05 before renormalization.
        assert_eq!(merged.modes[0].endpoint(), [0.0, 0.0]);
        assert_eq!(merged.modes[1].endpoint(), [20.0, 0.0]);
        assert_eq!(merged.modes[2].endpoint(), [30.0, 0.0]);
    }

    #[test]
    fn prediction_record_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let record = PredictionRecord {
            agent_id: 3,
            modes: vec![mode(1.0, [1.0, 2.0])],
            joint: None,
        };
        let path = dir.path().join("pred.json");
        write_prediction(&record, &path).unwrap();
        assert_eq!(read_prediction(&path).unwrap(), record);
    }
}
