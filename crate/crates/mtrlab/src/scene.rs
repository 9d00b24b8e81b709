//! Scene data model: agents, map polylines, agent-centric normalization,
//! and the masked fixed-shape arrays consumed by the encoders.
//!
//! Scenario files are UTF-8 JSON with top-level keys `agents`, `map`,
//! `interested_ids`, `frame_period`. Agent ids are indices into `agents`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

pub const CATEGORY_COUNT: usize = 3;
pub const LANE_TYPE_COUNT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentCategory {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentCategory {
    pub const ALL: [AgentCategory; CATEGORY_COUNT] = [
        AgentCategory::Vehicle,
        AgentCategory::Pedestrian,
        AgentCategory::Cyclist,
    ];

    pub fn index(self) -> usize {
        match self {
            AgentCategory::Vehicle => 0,
            AgentCategory::Pedestrian => 1,
            AgentCategory::Cyclist => 2,
        }
    }
}

impl fmt::Display for AgentCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentCategory::Vehicle => write!(f, "vehicle"),
            AgentCategory::Pedestrian => write!(f, "pedestrian"),
            AgentCategory::Cyclist => write!(f, "cyclist"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneType {
    Lane,
    RoadEdge,
    Crosswalk,
    StopLine,
}

impl LaneType {
    pub fn index(self) -> usize {
        match self {
            LaneType::Lane => 0,
            LaneType::RoadEdge => 1,
            LaneType::Crosswalk => 2,
            LaneType::StopLine => 3,
        }
    }
}

/// One agent frame. Invalid frames keep all numeric fields at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: [f64; 2],
    /// Length and width in meters.
    pub size: [f64; 2],
    /// Radians in (-pi, pi].
    pub heading: f64,
    pub velocity: [f64; 2],
    pub valid: bool,
}

impl AgentState {
    pub fn invalid() -> Self {
        Self {
            position: [0.0; 2],
            size: [0.0; 2],
            heading: 0.0,
            velocity: [0.0; 2],
            valid: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub position: [f64; 2],
    /// Unit tangent of the polyline at this point.
    pub direction: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub points: Vec<MapPoint>,
    pub lane_type: LaneType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub category: AgentCategory,
    /// Exactly `t` frames, oldest first; the last one is the current state.
    pub history: Vec<AgentState>,
    /// Exactly `T` frames.
    pub future: Vec<AgentState>,
}

impl Agent {
    pub fn current(&self) -> &AgentState {
        self.history.last().expect("agent history is never empty")
    }

    pub fn has_valid_history(&self) -> bool {
        self.history.iter().any(|s| s.valid)
    }

    /// Last valid history position, if any.
    pub fn last_valid_position(&self) -> Option<[f64; 2]> {
        self.history.iter().rev().find(|s| s.valid).map(|s| s.position)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub agents: Vec<Agent>,
    pub map: Vec<MapPolyline>,
    /// Indices into `agents` of the agents to predict.
    pub interested_ids: Vec<usize>,
    /// Seconds between consecutive frames.
    pub frame_period: f64,
}

impl Scenario {
    pub fn history_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.history.len())
    }

    pub fn future_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.future.len())
    }

    /// Structural invariants shared by generated and loaded scenarios.
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::domain("scenario has no agents"));
        }
        let t = self.history_len();
        let f = self.future_len();
        for (i, a) in self.agents.iter().enumerate() {
            if a.history.len() != t || a.future.len() != f {
                return Err(Error::domain(format!(
                    "agent {i} has {}/{} history/future frames, expected {t}/{f}",
                    a.history.len(),
                    a.future.len()
                )));
            }
            for s in a.history.iter().chain(a.future.iter()) {
                if s.valid {
                    if !(s.heading > -PI && s.heading <= PI) {
                        return Err(Error::domain(format!("agent {i} heading out of (-pi, pi]")));
                    }
                    if s.size[0] <= 0.0 || s.size[1] <= 0.0 {
                        return Err(Error::domain(format!("agent {i} has non-positive size")));
                    }
                }
            }
        }
        for (i, p) in self.map.iter().enumerate() {
            if p.points.len() < 2 {
                return Err(Error::domain(format!("map polyline {i} has < 2 points")));
            }
        }
        for &id in &self.interested_ids {
            let a = self
                .agents
                .get(id)
                .ok_or_else(|| Error::domain(format!("interested id {id} out of range")))?;
            if !a.current().valid {
                return Err(Error::domain(format!(
                    "interested agent {id} has no valid current state"
                )));
            }
        }
        Ok(())
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Rigid 2-D transform `p -> R(angle) p + translation`.
///
/// `normalize_to_agent` returns the agent-frame scenario together with the
/// transform mapping agent-frame coordinates back to world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub angle: f64,
    pub translation: [f64; 2],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            angle: 0.0,
            translation: [0.0; 2],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }

    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.angle.sin_cos();
        let t = self.translation;
        Self {
            angle: -self.angle,
            translation: [-(c * t[0] + s * t[1]), -(-s * t[0] + c * t[1])],
        }
    }
}

fn transform_state(s: &AgentState, tf: &RigidTransform) -> AgentState {
    if !s.valid {
        return *s;
    }
    AgentState {
        position: tf.apply(s.position),
        size: s.size,
        heading: wrap_angle(s.heading + tf.angle),
        velocity: tf.rotate(s.velocity),
        valid: true,
    }
}

/// Re-expresses the whole scenario in the coordinate frame of `agent_id`:
/// its current position moves to the origin and its current heading aligns
/// with +x. Returns the normalized scenario plus the agent-to-world transform.
pub fn normalize_to_agent(scenario: &Scenario, agent_id: usize) -> Result<(Scenario, RigidTransform)> {
    let agent = scenario
        .agents
        .get(agent_id)
        .ok_or_else(|| Error::domain(format!("agent id {agent_id} out of range")))?;
    let current = agent.current();
    if !current.valid {
        return Err(Error::domain(format!(
            "agent {agent_id} has no valid current state to normalize to"
        )));
    }
    let to_world = RigidTransform {
        angle: current.heading,
        translation: current.position,
    };
    let to_agent = to_world.inverse();

    let agents = scenario
        .agents
        .iter()
        .map(|a| Agent {
            category: a.category,
            history: a.history.iter().map(|s| transform_state(s, &to_agent)).collect(),
            future: a.future.iter().map(|s| transform_state(s, &to_agent)).collect(),
        })
        .collect();
    let map = scenario
        .map
        .iter()
        .map(|p| MapPolyline {
            points: p
                .points
                .iter()
                .map(|pt| MapPoint {
                    position: to_agent.apply(pt.position),
                    direction: to_agent.rotate(pt.direction),
                })
                .collect(),
            lane_type: p.lane_type,
        })
        .collect();

    Ok((
        Scenario {
            agents,
            map,
            interested_ids: scenario.interested_ids.clone(),
            frame_period: scenario.frame_period,
        },
        to_world,
    ))
}

/// Masked fixed-shape arrays for the polyline encoders.
///
/// Agent point channels: `[x, y, length, width, heading, vx, vy,
/// category one-hot (3), time one-hot (t)]`; map point channels:
/// `[x, y, dir_x, dir_y, lane type one-hot (4)]`. Masked-out entries are
/// exactly zero.
#[derive(Clone, Debug)]
pub struct PolylineBatch {
    pub n_agents: usize,
    pub t_hist: usize,
    pub agent_channels: usize,
    /// `[n_agents * t_hist, agent_channels]` row-major.
    pub agent_array: Vec<f64>,
    pub agent_mask: Vec<bool>,
    pub n_map: usize,
    pub pts_per_polyline: usize,
    pub map_channels: usize,
    /// `[n_map * pts_per_polyline, map_channels]` row-major.
    pub map_array: Vec<f64>,
    pub map_mask: Vec<bool>,
    pub agent_last_position: Vec<[f64; 2]>,
    pub agent_last_velocity: Vec<[f64; 2]>,
    pub map_center: Vec<[f64; 2]>,
    /// Whether the agent has at least one valid history frame.
    pub agent_valid: Vec<bool>,
    pub categories: Vec<AgentCategory>,
    /// True when the source scenario had an empty map.
    pub map_empty_warning: bool,
    pub frame_period: f64,
}

pub fn agent_channel_count(t_hist: usize) -> usize {
    7 + CATEGORY_COUNT + t_hist
}

pub const MAP_CHANNELS: usize = 4 + LANE_TYPE_COUNT;

/// Build masked arrays from an agent-centric scenario.
///
/// Longer lanes are split into chunks of at most `pts_per_polyline` points
/// (the final chunk keeps the remainder); the `max_map_polylines` chunks
/// whose centers are nearest the origin are retained, nearest first.
pub fn build_polyline_batch(
    scenario: &Scenario,
    max_map_polylines: usize,
    pts_per_polyline: usize,
) -> PolylineBatch {
    let t = scenario.history_len();
    let ca = agent_channel_count(t);
    let n_agents = scenario.agents.len();

    let mut agent_array = vec![0.0; n_agents * t * ca];
    let mut agent_mask = vec![false; n_agents * t];
    let mut agent_last_position = Vec::with_capacity(n_agents);
    let mut agent_last_velocity = Vec::with_capacity(n_agents);
    let mut agent_valid = Vec::with_capacity(n_agents);
    let mut categories = Vec::with_capacity(n_agents);

    for (i, agent) in scenario.agents.iter().enumerate() {
        categories.push(agent.category);
        agent_valid.push(agent.has_valid_history());
        agent_last_position.push(agent.last_valid_position().unwrap_or([0.0, 0.0]));
        agent_last_velocity.push(
            agent
                .history
                .iter()
                .rev()
                .find(|s| s.valid)
                .map(|s| s.velocity)
                .unwrap_or([0.0, 0.0]),
        );
        for (step, s) in agent.history.iter().enumerate() {
            if !s.valid {
                continue;
            }
            agent_mask[i * t + step] = true;
            let row = &mut agent_array[(i * t + step) * ca..(i * t + step + 1) * ca];
            row[0] = s.position[0];
            row[1] = s.position[1];
            row[2] = s.size[0];
            row[3] = s.size[1];
            row[4] = s.heading;
            row[5] = s.velocity[0];
            row[6] = s.velocity[1];
            row[7 + agent.category.index()] = 1.0;
            row[7 + CATEGORY_COUNT + step] = 1.0;
        }
    }

    // Chunk lanes, then keep the nearest chunks by center distance.
    struct Chunk<'a> {
        points: &'a [MapPoint],
        lane_type: LaneType,
        center: [f64; 2],
    }
    let mut chunks = Vec::new();
    for poly in &scenario.map {
        for piece in poly.points.chunks(pts_per_polyline) {
            let mut cx = 0.0;
            let mut cy = 0.0;
            for p in piece {
                cx += p.position[0];
                cy += p.position[1];
            }
            let n = piece.len() as f64;
            chunks.push(Chunk {
                points: piece,
                lane_type: poly.lane_type,
                center: [cx / n, cy / n],
            });
        }
    }
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    order.sort_by(|&a, &b| {
        let da = chunks[a].center[0].powi(2) + chunks[a].center[1].powi(2);
        let db = chunks[b].center[0].powi(2) + chunks[b].center[1].powi(2);
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    order.truncate(max_map_polylines);

    let n_map = order.len();
    let mut map_array = vec![0.0; n_map * pts_per_polyline * MAP_CHANNELS];
    let mut map_mask = vec![false; n_map * pts_per_polyline];
    let mut map_center = Vec::with_capacity(n_map);
    for (slot, &ci) in order.iter().enumerate() {
        let chunk = &chunks[ci];
        map_center.push(chunk.center);
        for (j, p) in chunk.points.iter().enumerate() {
            let r = slot * pts_per_polyline + j;
            map_mask[r] = true;
            let row = &mut map_array[r * MAP_CHANNELS..(r + 1) * MAP_CHANNELS];
            row[0] = p.position[0];
            row[1] = p.position[1];
            row[2] = p.direction[0];
            row[3] = p.direction[1];
            row[4 + chunk.lane_type.index()] = 1.0;
        }
    }

    PolylineBatch {
        n_agents,
        t_hist: t,
        agent_channels: ca,
        agent_array,
        agent_mask,
        n_map,
        pts_per_polyline,
        map_channels: MAP_CHANNELS,
        map_array,
        map_mask,
        agent_last_position,
        agent_last_velocity,
        map_center,
        agent_valid,
        categories,
        map_empty_warning: scenario.map.is_empty(),
        frame_period: scenario.frame_period,
    }
}

pub fn write_scenario(scenario: &Scenario, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(scenario).expect("scenario serialization is infallible");
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let scenario: Scenario = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

/// Read a newline-separated manifest of scenario file paths.
///
/// Relative entries are resolved against the manifest's directory, unless the
/// `MTRLAB_DATA_DIR` environment variable names a dataset root.
pub fn read_manifest(path: &Path) -> Result<Vec<std::path::PathBuf>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = std::env::var_os("MTRLAB_DATA_DIR")
        .map(std::path::PathBuf::from)
        .or_else(|| path.parent().map(|p| p.to_path_buf()))
        .unwrap_or_default();
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = std::path::PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn simple_state(x: f64, y: f64, heading: f64) -> AgentState {
        AgentState {
            position: [x, y],
            size: [4.0, 2.0],
            heading,
            velocity: [1.0, 0.0],
            valid: true,
        }
    }

    fn two_agent_scenario() -> Scenario {
        let a0 = Agent {
            category: AgentCategory::Vehicle,
            history: vec![simple_state(10.0, 0.0, PI / 2.0); 3],
            future: vec![simple_state(10.0, 5.0, PI / 2.0); 4],
        };
        let a1 = Agent {
            category: AgentCategory::Pedestrian,
            history: vec![simple_state(10.0, 5.0, 0.0); 3],
            future: vec![simple_state(11.0, 5.0, 0.0); 4],
        };
        Scenario {
            agents: vec![a0, a1],
            map: vec![MapPolyline {
                points: vec![
                    MapPoint {
                        position: [0.0, 0.0],
                        direction: [1.0, 0.0],
                    },
                    MapPoint {
                        position: [1.0, 0.0],
                        direction: [1.0, 0.0],
                    },
                ],
                lane_type: LaneType::Lane,
            }],
            interested_ids: vec![0],
            frame_period: 0.1,
        }
    }

    #[test]
    fn normalize_identity_when_agent_at_origin() {
        let mut s = two_agent_scenario();
        let a0 = &mut s.agents[0];
        for st in a0.history.iter_mut().chain(a0.future.iter_mut()) {
            st.heading = 0.0;
        }
        for st in a0.history.iter_mut() {
            st.position = [0.0, 0.0];
        }
        let (n, tf) = normalize_to_agent(&s, 0).unwrap();
        assert_eq!(tf.angle, 0.0);
        assert_eq!(tf.translation, [0.0, 0.0]);
        assert_eq!(n.agents[1], s.agents[1]);
    }

    #[test]
    fn normalize_rotates_point_into_agent_frame() {
        // Agent at (10, 0) heading pi/2; the point (10, 5) lands at (5, 0).
        let s = two_agent_scenario();
        let (n, _) = normalize_to_agent(&s, 0).unwrap();
        let p = n.agents[1].history[2].position;
        assert_abs_diff_eq!(p[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
        // Interested agent sits at the origin heading +x.
        let cur = n.agents[0].current();
        assert_abs_diff_eq!(cur.position[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cur.heading, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_round_trips_through_inverse() {
        let s = two_agent_scenario();
        let (n, to_world) = normalize_to_agent(&s, 0).unwrap();
        for (orig, norm) in s.agents.iter().zip(&n.agents) {
            for (os, ns) in orig.history.iter().zip(&norm.history) {
                let back = to_world.apply(ns.position);
                assert_abs_diff_eq!(back[0], os.position[0], epsilon = 1e-9);
                assert_abs_diff_eq!(back[1], os.position[1], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn normalize_preserves_pairwise_distances() {
        let s = two_agent_scenario();
        let (n, _) = normalize_to_agent(&s, 0).unwrap();
        let d_before = {
            let a = s.agents[0].history[0].position;
            let b = s.agents[1].future[3].position;
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };
        let d_after = {
            let a = n.agents[0].history[0].position;
            let b = n.agents[1].future[3].position;
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };
        assert_abs_diff_eq!(d_before, d_after, epsilon = 1e-9);
    }

    #[test]
    fn normalize_rejects_invalid_current_state() {
        let mut s = two_agent_scenario();
        s.agents[0].history[2].valid = false;
        assert!(matches!(normalize_to_agent(&s, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn chunking_splits_45_points_into_20_20_5() {
        let mut s = two_agent_scenario();
        let pts: Vec<MapPoint> = (0..45)
            .map(|i| MapPoint {
                position: [i as f64, 0.0],
                direction: [1.0, 0.0],
            })
            .collect();
        s.map = vec![MapPolyline {
            points: pts,
            lane_type: LaneType::Lane,
        }];
        let b = build_polyline_batch(&s, 10, 20);
        assert_eq!(b.n_map, 3);
        let counts: Vec<usize> = (0..3)
            .map(|c| (0..20).filter(|&j| b.map_mask[c * 20 + j]).count())
            .collect();
        let mut sorted = counts.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![5, 20, 20]);
        // Conservation: valid points before == after.
        assert_eq!(counts.iter().sum::<usize>(), 45);
    }

    #[test]
    fn nearest_polylines_retained() {
        let mut s = two_agent_scenario();
        let mk = |x: f64| MapPolyline {
            points: vec![
                MapPoint {
                    position: [x, 0.0],
                    direction: [1.0, 0.0],
                },
                MapPoint {
                    position: [x, 1.0],
                    direction: [1.0, 0.0],
                },
            ],
            lane_type: LaneType::Lane,
        };
        s.map = vec![mk(100.0), mk(1.0), mk(10.0)];
        let b = build_polyline_batch(&s, 2, 20);
        assert_eq!(b.n_map, 2);
        assert_abs_diff_eq!(b.map_center[0][0], 1.0);
        assert_abs_diff_eq!(b.map_center[1][0], 10.0);
    }

    #[test]
    fn masked_entries_are_zero_and_full_histories_fully_masked() {
        let s = two_agent_scenario();
        let b = build_polyline_batch(&s, 8, 20);
        assert!(b.agent_mask.iter().all(|&m| m), "all frames valid");
        for (r, &valid) in b.map_mask.iter().enumerate() {
            if !valid {
                let row = &b.map_array[r * b.map_channels..(r + 1) * b.map_channels];
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn empty_map_sets_warning_flag() {
        let mut s = two_agent_scenario();
        s.map.clear();
        let b = build_polyline_batch(&s, 8, 20);
        assert!(b.map_empty_warning);
        assert_eq!(b.n_map, 0);
    }

    #[test]
    fn scenario_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let s = two_agent_scenario();
        write_scenario(&s, &path).unwrap();
        let back = read_scenario(&path).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn missing_field_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"agents": [], "map": [], "interested_ids": []}"#).unwrap();
        let err = read_scenario(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frame_period"), "error should name the missing field: {msg}");
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.json");
        let full = serde_json::to_string(&two_agent_scenario()).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert!(matches!(read_scenario(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn wrap_angle_stays_in_half_open_interval() {
        for k in -8..=8 {
            let a = wrap_angle(0.3 + k as f64 * PI);
            assert!(a > -PI && a <= PI);
        }
        assert_abs_diff_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI);
    }
}
