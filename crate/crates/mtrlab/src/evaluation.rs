//! Marginal and joint evaluation metrics: minADE, minFDE, miss rate, a
//! simplified mAP, and dense-future ADE/FDE.
//!
//! The mAP here pools all predicted modes of a category across scenarios,
//! ranks them by confidence, greedily marks a mode as a true positive when
//! its final displacement error is within the threshold and its ground truth
//! is still unmatched, and integrates the interpolated precision-recall
//! curve. A miss is defined by the FDE threshold alone. Both definitions are
//! intentionally simpler than the reference evaluation service but are used
//! consistently across all ablations.

use crate::error::{Error, Result};
use crate::objective::GtFuture;
use crate::postprocess::{JointPredictionSet, PredictionSet};
use crate::scene::AgentCategory;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const DEFAULT_MISS_THRESHOLD: f64 = 2.0;

/// Displacement errors of one trajectory against a partially valid GT.
fn ade_fde(trajectory: &[[f64; 2]], gt: &GtFuture) -> Option<(f64, f64)> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut last = None;
    for (t, (&p, &v)) in trajectory.iter().zip(gt.valid.iter()).enumerate() {
        if !v {
            continue;
        }
        let d = ((p[0] - gt.positions[t][0]).powi(2) + (p[1] - gt.positions[t][1]).powi(2)).sqrt();
        sum += d;
        count += 1;
        last = Some(d);
    }
    last.map(|fde| (sum / count as f64, fde))
}

/// Minimum average displacement error over modes.
pub fn min_ade(pred: &PredictionSet, gt: &GtFuture) -> Option<f64> {
    pred.modes
        .iter()
        .filter_map(|m| ade_fde(&m.trajectory, gt).map(|(a, _)| a))
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

/// Minimum final displacement error (at the last valid step) over modes.
pub fn min_fde(pred: &PredictionSet, gt: &GtFuture) -> Option<f64> {
    pred.modes
        .iter()
        .filter_map(|m| ade_fde(&m.trajectory, gt).map(|(_, f)| f))
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

/// A ground truth is missed iff no mode's FDE is within the threshold.
pub fn is_miss(pred: &PredictionSet, gt: &GtFuture, threshold: f64) -> bool {
    match min_fde(pred, gt) {
        Some(f) => f > threshold,
        None => true,
    }
}

/// One evaluated interested agent.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub category: AgentCategory,
    pub pred: PredictionSet,
    pub gt: GtFuture,
}

/// Area under the interpolated precision-recall curve for one category pool.
///
/// Modes are ranked by descending confidence; ties order by ascending FDE so
/// the result does not depend on scenario shard order.
pub fn average_precision(items: &[&EvalItem], threshold: f64) -> f64 {
    let n_gt = items.len();
    if n_gt == 0 {
        return 0.0;
    }
    struct Ranked {
        confidence: f64,
        fde: f64,
        item: usize,
    }
    let mut ranked = Vec::new();
    for (i, item) in items.iter().enumerate() {
        for m in &item.pred.modes {
            let fde = ade_fde(&m.trajectory, &item.gt).map(|(_, f)| f).unwrap_or(f64::INFINITY);
            ranked.push(Ranked {
                confidence: m.confidence,
                fde,
                item: i,
            });
        }
    }
    ranked.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.fde.partial_cmp(&b.fde).unwrap())
    });

    let mut matched = vec![false; n_gt];
    let mut tp = 0usize;
    let mut precisions = Vec::with_capacity(ranked.len());
    let mut recalls = Vec::with_capacity(ranked.len());
    for (rank, r) in ranked.iter().enumerate() {
        if r.fde <= threshold && !matched[r.item] {
            matched[r.item] = true;
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }

    // Monotone precision envelope from the right, integrated over recall.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..envelope.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * envelope[i];
            prev_recall = recalls[i];
        }
    }
    ap
}

/// Joint evaluation of one interacting pair.
#[derive(Clone, Debug)]
pub struct JointEvalItem {
    pub category: AgentCategory,
    pub pred: JointPredictionSet,
    pub gts: [GtFuture; 2],
}

/// Joint minADE: per-mode mean of the two agents' ADEs, minimized over modes.
pub fn joint_min_ade(pred: &JointPredictionSet, gts: &[GtFuture; 2]) -> Option<f64> {
    pred.modes
        .iter()
        .filter_map(|m| {
            let a = ade_fde(&m.trajectories[0], &gts[0])?;
            let b = ade_fde(&m.trajectories[1], &gts[1])?;
            Some(0.5 * (a.0 + b.0))
        })
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

pub fn joint_min_fde(pred: &JointPredictionSet, gts: &[GtFuture; 2]) -> Option<f64> {
    pred.modes
        .iter()
        .filter_map(|m| {
            let a = ade_fde(&m.trajectories[0], &gts[0])?;
            let b = ade_fde(&m.trajectories[1], &gts[1])?;
            Some(0.5 * (a.1 + b.1))
        })
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

/// A joint mode hits iff BOTH agents' FDEs are within the threshold.
pub fn joint_is_miss(pred: &JointPredictionSet, gts: &[GtFuture; 2], threshold: f64) -> bool {
    !pred.modes.iter().any(|m| {
        let a = ade_fde(&m.trajectories[0], &gts[0]);
        let b = ade_fde(&m.trajectories[1], &gts[1]);
        matches!((a, b), (Some((_, fa)), Some((_, fb))) if fa <= threshold && fb <= threshold)
    })
}

fn joint_average_precision(items: &[&JointEvalItem], threshold: f64) -> f64 {
    let n_gt = items.len();
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(f64, f64, usize)> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        for m in &item.pred.modes {
            let worst = match (
                ade_fde(&m.trajectories[0], &item.gts[0]),
                ade_fde(&m.trajectories[1], &item.gts[1]),
            ) {
                (Some((_, fa)), Some((_, fb))) => fa.max(fb),
                _ => f64::INFINITY,
            };
            ranked.push((m.confidence, worst, i));
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
    let mut matched = vec![false; n_gt];
    let mut tp = 0;
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    for (rank, &(_, worst, item)) in ranked.iter().enumerate() {
        if worst <= threshold && !matched[item] {
            matched[item] = true;
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..envelope.len() {
        if recalls[i] > prev {
            ap += (recalls[i] - prev) * envelope[i];
            prev = recalls[i];
        }
    }
    ap
}

/// Dense-future evaluation of one agent (single trajectory).
#[derive(Clone, Debug)]
pub struct DenseEvalItem {
    pub category: AgentCategory,
    pub trajectory: Vec<[f64; 2]>,
    pub gt: GtFuture,
}

/// Per-category metric row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub category: String,
    pub count: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_ade: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_fde: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_miss_rate_2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_miss_rate_6: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMetricRow {
    pub category: String,
    pub count: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map: f64,
}

/// Full evaluation report: per-category rows plus the unweighted average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miss_threshold: f64,
    pub rows: Vec<MetricRow>,
    pub average: MetricRow,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_rows: Option<Vec<JointMetricRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_average: Option<JointMetricRow>,
}

fn mean(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn mean_opt(vals: &[Option<f64>]) -> Option<f64> {
    let known: Vec<f64> = vals.iter().flatten().copied().collect();
    if known.is_empty() || known.len() != vals.len() {
        None
    } else {
        Some(mean(&known))
    }
}

/// Compute the full report.
///
/// Metric accumulation is order-independent: every metric is a function of
/// the item multiset (ties in the mAP ranking order by content, not input
/// position), so scenario shards can be evaluated and concatenated in any
/// order.
pub fn evaluate(
    items: &[EvalItem],
    dense_items: &[DenseEvalItem],
    joint_items: &[JointEvalItem],
    miss_threshold: f64,
) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::domain("no evaluation items"));
    }
    let mut by_cat: BTreeMap<AgentCategory, Vec<&EvalItem>> = BTreeMap::new();
    for item in items {
        by_cat.entry(item.category).or_default().push(item);
    }

    let mut rows = Vec::new();
    for (cat, cat_items) in &by_cat {
        let ades: Vec<f64> = cat_items.iter().filter_map(|i| min_ade(&i.pred, &i.gt)).collect();
        let fdes: Vec<f64> = cat_items.iter().filter_map(|i| min_fde(&i.pred, &i.gt)).collect();
        let misses = cat_items
            .iter()
            .filter(|i| is_miss(&i.pred, &i.gt, miss_threshold))
            .count();
        let dense: Vec<&DenseEvalItem> =
            dense_items.iter().filter(|d| d.category == *cat).collect();
        let dense_pairs: Vec<(f64, f64)> = dense
            .iter()
            .filter_map(|d| ade_fde(&d.trajectory, &d.gt))
            .collect();
        let (dense_ade, dense_fde, dense_m2, dense_m6) = if dense_pairs.is_empty() {
            (None, None, None, None)
        } else {
            let n = dense_pairs.len() as f64;
            (
                Some(dense_pairs.iter().map(|p| p.0).sum::<f64>() / n),
                Some(dense_pairs.iter().map(|p| p.1).sum::<f64>() / n),
                Some(dense_pairs.iter().filter(|p| p.1 > 2.0).count() as f64 / n),
                Some(dense_pairs.iter().filter(|p| p.1 > 6.0).count() as f64 / n),
            )
        };
        rows.push(MetricRow {
            category: cat.to_string(),
            count: cat_items.len(),
            min_ade: mean(&ades),
            min_fde: mean(&fdes),
            miss_rate: misses as f64 / cat_items.len() as f64,
            map: average_precision(cat_items, miss_threshold),
            dense_ade,
            dense_fde,
            dense_miss_rate_2: dense_m2,
            dense_miss_rate_6: dense_m6,
        });
    }

    let average = MetricRow {
        category: "avg".into(),
        count: items.len(),
        min_ade: mean(&rows.iter().map(|r| r.min_ade).collect::<Vec<_>>()),
        min_fde: mean(&rows.iter().map(|r| r.min_fde).collect::<Vec<_>>()),
        miss_rate: mean(&rows.iter().map(|r| r.miss_rate).collect::<Vec<_>>()),
        map: mean(&rows.iter().map(|r| r.map).collect::<Vec<_>>()),
        dense_ade: mean_opt(&rows.iter().map(|r| r.dense_ade).collect::<Vec<_>>()),
        dense_fde: mean_opt(&rows.iter().map(|r| r.dense_fde).collect::<Vec<_>>()),
        dense_miss_rate_2: mean_opt(&rows.iter().map(|r| r.dense_miss_rate_2).collect::<Vec<_>>()),
        dense_miss_rate_6: mean_opt(&rows.iter().map(|r| r.dense_miss_rate_6).collect::<Vec<_>>()),
    };

    let (joint_rows, joint_average) = if joint_items.is_empty() {
        (None, None)
    } else {
        let mut by_cat: BTreeMap<AgentCategory, Vec<&JointEvalItem>> = BTreeMap::new();
        for item in joint_items {
            by_cat.entry(item.category).or_default().push(item);
        }
        let mut jrows = Vec::new();
        for (cat, cat_items) in &by_cat {
            let ades: Vec<f64> = cat_items
                .iter()
                .filter_map(|i| joint_min_ade(&i.pred, &i.gts))
                .collect();
            let fdes: Vec<f64> = cat_items
                .iter()
                .filter_map(|i| joint_min_fde(&i.pred, &i.gts))
                .collect();
            let misses = cat_items
                .iter()
                .filter(|i| joint_is_miss(&i.pred, &i.gts, miss_threshold))
                .count();
            jrows.push(JointMetricRow {
                category: cat.to_string(),
                count: cat_items.len(),
                min_ade: mean(&ades),
                min_fde: mean(&fdes),
                miss_rate: misses as f64 / cat_items.len() as f64,
                map: joint_average_precision(cat_items, miss_threshold),
            });
        }
        let javg = JointMetricRow {
            category: "avg".into(),
            count: joint_items.len(),
            min_ade: mean(&jrows.iter().map(|r| r.min_ade).collect::<Vec<_>>()),
            min_fde: mean(&jrows.iter().map(|r| r.min_fde).collect::<Vec<_>>()),
            miss_rate: mean(&jrows.iter().map(|r| r.miss_rate).collect::<Vec<_>>()),
            map: mean(&jrows.iter().map(|r| r.map).collect::<Vec<_>>()),
        };
        (Some(jrows), Some(javg))
    };

    Ok(MetricReport {
        miss_threshold,
        rows,
        average,
        joint_rows,
        joint_average,
    })
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serialization");
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// CSV mirror of the per-category table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,count,min_ade,min_fde,miss_rate,map\n");
        for row in self.rows.iter().chain(std::iter::once(&self.average)) {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                row.category, row.count, row.min_ade, row.min_fde, row.miss_rate, row.map
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
