//! Per-category intention points fitted by k-means over ground-truth
//! trajectory endpoints in the agent-centric frame.

use crate::error::{Error, Result};
use crate::scene::{normalize_to_agent, AgentCategory, Scenario};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CONVERGENCE_TOL: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 100;

/// Fitted intention points for every category present in the source data,
/// together with the fitting seed and a fingerprint of the source manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionPointSet {
    pub points: BTreeMap<AgentCategory, Vec<[f64; 2]>>,
    pub seed: u64,
    pub source_manifest_hash: String,
}

impl IntentionPointSet {
    pub fn category_points(&self, cat: AgentCategory) -> Result<&Vec<[f64; 2]>> {
        self.points
            .get(&cat)
            .ok_or_else(|| Error::config(format!("no intention points fitted for category {cat}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("intention serialization");
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// FNV-1a 64-bit hash, hex-encoded; fingerprints manifests and configs.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Result of one k-means fit, with the SSE after every Lloyd iteration.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Vec<[f64; 2]>,
    pub sse_per_iteration: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Deterministic for a fixed seed; empty clusters are re-seeded to the point
/// farthest from its nearest centroid; stops when the largest centroid shift
/// drops below [`CONVERGENCE_TOL`] or after [`MAX_ITERATIONS`].
pub fn fit_kmeans(points: &[[f64; 2]], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::domain(format!(
            "cannot fit {k} clusters from {} points",
            points.len()
        )));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::domain("endpoints must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids: Vec<[f64; 2]> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            points[rng.random_range(0..points.len())]
        } else {
            let mut x = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                x -= w;
                if x <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            points[chosen]
        };
        centroids.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(*p, next));
        }
    }

    let mut assignment = vec![0usize; points.len()];
    let mut sse_per_iteration = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        // Assign.
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = dist2(*p, centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = dist2(*p, *centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        // Update.
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sums[assignment[i]][0] += p[0];
            sums[assignment[i]][1] += p[1];
            counts[assignment[i]] += 1;
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed dead centroid at the point farthest from its
                // nearest centroid.
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        let da = centroids.iter().map(|&ct| dist2(**a, ct)).fold(f64::INFINITY, f64::min);
                        let db = centroids.iter().map(|&ct| dist2(**b, ct)).fold(f64::INFINITY, f64::min);
                        da.partial_cmp(&db).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                shift = shift.max(dist2(centroids[c], points[far]).sqrt());
                centroids[c] = points[far];
            } else {
                let next = [
                    sums[c][0] / counts[c] as f64,
                    sums[c][1] / counts[c] as f64,
                ];
                shift = shift.max(dist2(centroids[c], next).sqrt());
                centroids[c] = next;
            }
        }
        // SSE with the fresh centroids.
        let sse: f64 = points
            .iter()
            .map(|&p| {
                centroids
                    .iter()
                    .map(|&c| dist2(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        sse_per_iteration.push(sse);
        if shift < CONVERGENCE_TOL {
            break;
        }
    }

    Ok(KMeansFit {
        centroids,
        sse_per_iteration,
    })
}

/// Ground-truth future endpoint of one interested agent in its own frame.
///
/// Futures whose final step is invalid are excluded.
pub fn agent_endpoint(scenario: &Scenario, agent_id: usize) -> Result<Option<[f64; 2]>> {
    let (normalized, _) = normalize_to_agent(scenario, agent_id)?;
    let agent = &normalized.agents[agent_id];
    match agent.future.last() {
        Some(last) if last.valid => Ok(Some(last.position)),
        _ => Ok(None),
    }
}

/// Gather per-category endpoints from every interested agent in a dataset.
pub fn collect_endpoints(
    scenarios: &[Scenario],
) -> Result<BTreeMap<AgentCategory, Vec<[f64; 2]>>> {
    let mut out: BTreeMap<AgentCategory, Vec<[f64; 2]>> = BTreeMap::new();
    for s in scenarios {
        for &id in &s.interested_ids {
            if let Some(ep) = agent_endpoint(s, id)? {
                out.entry(s.agents[id].category).or_default().push(ep);
            }
        }
    }
    Ok(out)
}

/// Fit per-category intention points with k-means.
pub fn fit_intention_points(
    endpoints: &BTreeMap<AgentCategory, Vec<[f64; 2]>>,
    k: usize,
    seed: u64,
    source_manifest_hash: String,
) -> Result<IntentionPointSet> {
    let mut points = BTreeMap::new();
    for (cat, eps) in endpoints {
        let fit = fit_kmeans(eps, k, seed ^ cat.index() as u64)?;
        points.insert(*cat, fit.centroids);
    }
    if points.is_empty() {
        return Err(Error::domain("no endpoints to fit intention points from"));
    }
    Ok(IntentionPointSet {
        points,
        seed,
        source_manifest_hash,
    })
}

/// Axis-aligned uniform grid of `k` points (cell centers) over a rectangle;
/// `k` must be a perfect square. Baseline alternative to the k-means distribution.
pub fn uniform_grid_points(
    min: [f64; 2],
    max: [f64; 2],
    k: usize,
    categories: &[AgentCategory],
) -> Result<IntentionPointSet> {
    let side = (k as f64).sqrt().round() as usize;
    if side * side != k || k == 0 {
        return Err(Error::domain(format!("grid point count {k} is not a perfect square")));
    }
    let mut pts = Vec::with_capacity(k);
    for iy in 0..side {
        for ix in 0..side {
            let u = (ix as f64 + 0.5) / side as f64;
            let v = (iy as f64 + 0.5) / side as f64;
            pts.push([min[0] + u * (max[0] - min[0]), min[1] + v * (max[1] - min[1])]);
        }
    }
    let mut points = BTreeMap::new();
    for &c in categories {
        points.insert(c, pts.clone());
    }
    Ok(IntentionPointSet {
        points,
        seed: 0,
        source_manifest_hash: String::from("uniform-grid"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn m_equals_k_recovers_points_exactly() {
        let pts = vec![[0.0, 0.0], [5.0, 1.0], [-3.0, 2.0], [1.0, -4.0]];
        let fit = fit_kmeans(&pts, 4, 11).unwrap();
        let mut got: Vec<_> = fit
            .centroids
            .iter()
            .map(|p| (format!("{:.9}", p[0]), format!("{:.9}", p[1])))
            .collect();
        let mut want: Vec<_> = pts
            .iter()
            .map(|p| (format!("{:.9}", p[0]), format!("{:.9}", p[1])))
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn unit_square_corners_split_into_left_right() {
        let pts = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        // Find a seed whose k-means++ picks one centroid per side.
        let mut found = None;
        for seed in 0..64 {
            let fit = fit_kmeans(&pts, 2, seed).unwrap();
            let mut xs: Vec<f64> = fit.centroids.iter().map(|c| c[0]).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if (xs[0] - 0.0).abs() < 1e-12 && (xs[1] - 1.0).abs() < 1e-12 {
                found = Some(fit);
                break;
            }
        }
        let fit = found.expect("some seed splits left/right");
        for c in &fit.centroids {
            assert_abs_diff_eq!(c[1], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn sse_is_monotone_non_increasing() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 2]> = (0..200)
            .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
            .collect();
        for seed in 0..5 {
            let fit = fit_kmeans(&pts, 8, seed).unwrap();
            for w in fit.sse_per_iteration.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "SSE increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn determinism_per_seed() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f64; 2]> = (0..50)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
            .collect();
        let a = fit_kmeans(&pts, 5, 99).unwrap();
        let b = fit_kmeans(&pts, 5, 99).unwrap();
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn too_few_points_is_a_domain_error() {
        let pts = vec![[0.0, 0.0], [1.0, 1.0]];
        assert!(matches!(fit_kmeans(&pts, 3, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn grid_of_four_gives_cell_centers() {
        let set = uniform_grid_points([0.0, 0.0], [1.0, 1.0], 4, &[AgentCategory::Vehicle]).unwrap();
        let pts = set.category_points(AgentCategory::Vehicle).unwrap();
        let mut got: Vec<(String, String)> = pts
            .iter()
            .map(|p| (format!("{:.3}", p[0]), format!("{:.3}", p[1])))
            .collect();
        got.sort();
        assert_eq!(
            got,
            vec![
                ("0.250".into(), "0.250".into()),
                ("0.250".into(), "0.750".into()),
                ("0.750".into(), "0.250".into()),
                ("0.750".into(), "0.750".into()),
            ]
        );
        assert!(uniform_grid_points([0.0, 0.0], [1.0, 1.0], 5, &[AgentCategory::Vehicle]).is_err());
    }

    #[test]
    fn intention_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut points = BTreeMap::new();
        points.insert(AgentCategory::Vehicle, vec![[1.0, 2.0], [3.0, 4.0]]);
        let set = IntentionPointSet {
            points,
            seed: 7,
            source_manifest_hash: fnv1a_hex(b"manifest"),
        };
        let path = dir.path().join("intentions.json");
        set.write(&path).unwrap();
        assert_eq!(IntentionPointSet::read(&path).unwrap(), set);
    }
}
