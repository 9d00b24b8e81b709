//! Synthetic traffic scenario generator.
//!
//! Scenarios are built from a lane template (straight, arc, or a 3/4-way
//! intersection). Agents follow lane routes with bounded kinematic noise;
//! on branching templates each agent samples its exit branch from the
//! configured probabilities, so repeated generation yields a genuinely
//! multimodal future distribution over near-identical histories. Output is
//! fully determined by `(seed, config)`.

use crate::error::{Error, Result};
use crate::scene::{
    wrap_angle, Agent, AgentCategory, AgentState, LaneType, MapPoint, MapPolyline, Scenario,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LaneTemplate {
    Straight {
        length: f64,
    },
    Arc {
        radius: f64,
        /// Swept angle in radians.
        angle: f64,
    },
    /// Branching junction. `arms = 3` offers left/right exits, `arms = 4`
    /// adds the straight-through route.
    Intersection {
        arms: u8,
        branch_probs: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub template: LaneTemplate,
    pub n_agents: usize,
    /// How many agents are marked interested (capped by n_agents).
    pub n_interested: usize,
    pub t_history: usize,
    pub t_future: usize,
    pub frame_period: f64,
    /// Fractions of pedestrian and cyclist agents; the rest are vehicles.
    pub pedestrian_fraction: f64,
    pub cyclist_fraction: f64,
    /// Std of the constant per-agent lateral offset from the centerline.
    pub lateral_noise: f64,
    /// Std of the per-frame positional jitter.
    pub jitter: f64,
    /// Probability that a non-interested agent has a partially valid track.
    pub partial_track_prob: f64,
    /// On branching templates, place a lead vehicle already mid-turn ahead
    /// of the first interested agent; the interested agent then takes the
    /// leader's branch with probability `follow_prob`.
    #[serde(default)]
    pub leader: bool,
    #[serde(default = "default_follow_prob")]
    pub follow_prob: f64,
}

fn default_follow_prob() -> f64 {
    0.85
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            template: LaneTemplate::Intersection {
                arms: 4,
                branch_probs: vec![0.5, 0.25, 0.25],
            },
            n_agents: 6,
            n_interested: 1,
            t_history: 5,
            t_future: 16,
            frame_period: 0.1,
            pedestrian_fraction: 0.15,
            cyclist_fraction: 0.15,
            lateral_noise: 0.15,
            jitter: 0.02,
            partial_track_prob: 0.25,
            leader: false,
            follow_prob: 0.85,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::domain("generator config has zero agents"));
        }
        if self.t_history == 0 || self.t_future == 0 {
            return Err(Error::domain("history/future lengths must be positive"));
        }
        if self.frame_period <= 0.0 {
            return Err(Error::domain("frame period must be positive"));
        }
        match &self.template {
            LaneTemplate::Straight { length } if *length <= 1.0 => {
                Err(Error::domain("straight lane too short"))
            }
            LaneTemplate::Arc { radius, angle } if *radius <= 0.0 || *angle <= 0.0 => {
                Err(Error::domain("arc template needs positive radius and angle"))
            }
            LaneTemplate::Intersection { arms, branch_probs } => {
                let expect = match arms {
                    3 => 2,
                    4 => 3,
                    _ => return Err(Error::domain("intersection arms must be 3 or 4")),
                };
                if branch_probs.len() != expect {
                    return Err(Error::domain(format!(
                        "intersection with {arms} arms needs {expect} branch probabilities"
                    )));
                }
                let sum: f64 = branch_probs.iter().sum();
                if branch_probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::domain("branch probabilities must be >= 0 and sum to 1"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Which branch each interested agent sampled, for Monte-Carlo checks and
/// dataset statistics.
#[derive(Clone, Debug, Default)]
pub struct GenTrace {
    pub interested_branches: Vec<(usize, usize)>,
}

/// A drivable route: dense centerline points with cumulative arclength.
struct Route {
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl Route {
    fn new(pts: Vec<[f64; 2]>) -> Self {
        let mut cum = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in pts.windows(2) {
            acc += ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cum.push(acc);
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position and unit tangent at arclength `s`; extends linearly past
    /// either end.
    fn sample(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let n = self.pts.len();
        if s <= 0.0 {
            let t = seg_tangent(self.pts[0], self.pts[1]);
            return ([self.pts[0][0] + s * t[0], self.pts[0][1] + s * t[1]], t);
        }
        if s >= self.length() {
            let t = seg_tangent(self.pts[n - 2], self.pts[n - 1]);
            let d = s - self.length();
            return (
                [self.pts[n - 1][0] + d * t[0], self.pts[n - 1][1] + d * t[1]],
                t,
            );
        }
        let i = match self
            .cum
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        };
        let t = seg_tangent(self.pts[i], self.pts[i + 1]);
        let d = s - self.cum[i];
        ([self.pts[i][0] + d * t[0], self.pts[i][1] + d * t[1]], t)
    }
}

fn seg_tangent(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let l = (dx * dx + dy * dy).sqrt().max(1e-12);
    [dx / l, dy / l]
}

fn polyline_of(route: &Route, lane_type: LaneType) -> MapPolyline {
    let pts = route
        .pts
        .windows(2)
        .map(|w| MapPoint {
            position: w[0],
            direction: seg_tangent(w[0], w[1]),
        })
        .chain(std::iter::once({
            let n = route.pts.len();
            MapPoint {
                position: route.pts[n - 1],
                direction: seg_tangent(route.pts[n - 2], route.pts[n - 1]),
            }
        }))
        .collect();
    MapPolyline {
        points: pts,
        lane_type,
    }
}

/// Dense points every ~1 unit along a straight segment.
fn straight_pts(from: [f64; 2], to: [f64; 2]) -> Vec<[f64; 2]> {
    let len = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt();
    let n = (len.ceil() as usize).max(2);
    (0..=n)
        .map(|i| {
            let u = i as f64 / n as f64;
            [from[0] + u * (to[0] - from[0]), from[1] + u * (to[1] - from[1])]
        })
        .collect()
}

fn arc_pts(center: [f64; 2], radius: f64, a0: f64, a1: f64) -> Vec<[f64; 2]> {
    let n = ((radius * (a1 - a0).abs()).ceil() as usize).max(4);
    (0..=n)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / n as f64;
            [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
        })
        .collect()
}

const APPROACH_LEN: f64 = 30.0;
const EXIT_LEN: f64 = 30.0;
const TURN_RADIUS: f64 = 6.0;
const LANE_HALF_WIDTH: f64 = 1.75;

struct LaneWorld {
    routes: Vec<Route>,
    branch_probs: Vec<f64>,
    /// Arclength at which routes diverge (0 when there is no branch).
    branch_at: f64,
    map: Vec<MapPolyline>,
}

fn build_world(template: &LaneTemplate) -> LaneWorld {
    match template {
        LaneTemplate::Straight { length } => {
            let route = Route::new(straight_pts([0.0, 0.0], [*length, 0.0]));
            let mut map = vec![polyline_of(&route, LaneType::Lane)];
            for side in [-1.0, 1.0] {
                let edge = Route::new(straight_pts(
                    [0.0, side * LANE_HALF_WIDTH],
                    [*length, side * LANE_HALF_WIDTH],
                ));
                map.push(polyline_of(&edge, LaneType::RoadEdge));
            }
            LaneWorld {
                routes: vec![route],
                branch_probs: vec![1.0],
                branch_at: 0.0,
                map,
            }
        }
        LaneTemplate::Arc { radius, angle } => {
            // Start at the origin heading +x, curving left.
            let pts = arc_pts([0.0, *radius], *radius, -FRAC_PI_2, -FRAC_PI_2 + angle);
            let route = Route::new(pts);
            let inner = Route::new(arc_pts(
                [0.0, *radius],
                radius - LANE_HALF_WIDTH,
                -FRAC_PI_2,
                -FRAC_PI_2 + angle,
            ));
            let outer = Route::new(arc_pts(
                [0.0, *radius],
                radius + LANE_HALF_WIDTH,
                -FRAC_PI_2,
                -FRAC_PI_2 + angle,
            ));
            let map = vec![
                polyline_of(&route, LaneType::Lane),
                polyline_of(&inner, LaneType::RoadEdge),
                polyline_of(&outer, LaneType::RoadEdge),
            ];
            LaneWorld {
                routes: vec![route],
                branch_probs: vec![1.0],
                branch_at: 0.0,
                map,
            }
        }
        LaneTemplate::Intersection { arms, branch_probs } => {
            // Approach from the south along +y, junction center at the origin.
            let approach = straight_pts([0.0, -APPROACH_LEN], [0.0, 0.0]);
            let mut routes = Vec::new();
            let mut route_kinds = Vec::new();
            if *arms == 4 {
                let mut straight = approach.clone();
                straight.extend(straight_pts([0.0, 0.0], [0.0, EXIT_LEN]).into_iter().skip(1));
                routes.push(Route::new(straight));
                route_kinds.push("straight");
            }
            // Left: quarter circle to heading -x, then west.
            let mut left = approach.clone();
            left.extend(
                arc_pts([-TURN_RADIUS, 0.0], TURN_RADIUS, 0.0, FRAC_PI_2)
                    .into_iter()
                    .skip(1),
            );
            left.extend(
                straight_pts([-TURN_RADIUS, TURN_RADIUS], [-TURN_RADIUS - EXIT_LEN, TURN_RADIUS])
                    .into_iter()
                    .skip(1),
            );
            routes.push(Route::new(left));
            route_kinds.push("left");
            // Right: quarter circle to heading +x, then east.
            let mut right = approach.clone();
            right.extend(
                arc_pts([TURN_RADIUS, 0.0], TURN_RADIUS, PI, FRAC_PI_2)
                    .into_iter()
                    .skip(1),
            );
            right.extend(
                straight_pts([TURN_RADIUS, TURN_RADIUS], [TURN_RADIUS + EXIT_LEN, TURN_RADIUS])
                    .into_iter()
                    .skip(1),
            );
            routes.push(Route::new(right));
            route_kinds.push("right");

            let mut map: Vec<MapPolyline> =
                routes.iter().map(|r| polyline_of(r, LaneType::Lane)).collect();
            // Cross street through the junction plus edges and furniture.
            let cross = Route::new(straight_pts(
                [-APPROACH_LEN, TURN_RADIUS],
                [APPROACH_LEN, TURN_RADIUS],
            ));
            map.push(polyline_of(&cross, LaneType::Lane));
            for side in [-1.0, 1.0] {
                let edge = Route::new(straight_pts(
                    [side * LANE_HALF_WIDTH, -APPROACH_LEN],
                    [side * LANE_HALF_WIDTH, -3.0],
                ));
                map.push(polyline_of(&edge, LaneType::RoadEdge));
            }
            let crosswalk = Route::new(straight_pts([-3.0, -4.0], [3.0, -4.0]));
            map.push(polyline_of(&crosswalk, LaneType::Crosswalk));
            let stop = Route::new(straight_pts([-2.0, -5.5], [2.0, -5.5]));
            map.push(polyline_of(&stop, LaneType::StopLine));

            LaneWorld {
                routes,
                branch_probs: branch_probs.clone(),
                branch_at: APPROACH_LEN,
                map,
            }
        }
    }
}

fn category_speed_range(cat: AgentCategory) -> [f64; 2] {
    match cat {
        AgentCategory::Vehicle => [3.0, 10.0],
        AgentCategory::Pedestrian => [0.8, 1.5],
        AgentCategory::Cyclist => [2.0, 5.0],
    }
}

fn category_size(cat: AgentCategory) -> [f64; 2] {
    match cat {
        AgentCategory::Vehicle => [4.5, 2.0],
        AgentCategory::Pedestrian => [0.8, 0.8],
        AgentCategory::Cyclist => [1.8, 0.6],
    }
}

fn sample_branch(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Generate one scenario. Identical `(seed, config)` pairs produce
/// byte-identical scenarios.
pub fn generate_synthetic_scenario(seed: u64, config: &GeneratorConfig) -> Result<Scenario> {
    generate_with_trace(seed, config).map(|(s, _)| s)
}

/// Like [`generate_synthetic_scenario`] but also reports which branch each
/// interested agent sampled.
pub fn generate_with_trace(seed: u64, config: &GeneratorConfig) -> Result<(Scenario, GenTrace)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = build_world(&config.template);
    let dt = config.frame_period;
    let t_hist = config.t_history;
    let t_fut = config.t_future;
    let n_interested = config.n_interested.clamp(1, config.n_agents);

    let mut agents = Vec::with_capacity(config.n_agents);
    let mut trace = GenTrace::default();

    // With a leader, the first interested agent follows the leader's branch
    // most of the time; the leader is already mid-turn so its history
    // reveals that branch. The marginal branch distribution is unchanged.
    let leader_active = config.leader && world.branch_at > 0.0 && config.n_agents > n_interested;
    let leader_branch = if leader_active {
        Some(sample_branch(&mut rng, &world.branch_probs))
    } else {
        None
    };
    let leader_index = n_interested;

    for idx in 0..config.n_agents {
        let interested = idx < n_interested;
        let cat = if interested {
            AgentCategory::Vehicle
        } else {
            let x: f64 = rng.random();
            if x < config.pedestrian_fraction {
                AgentCategory::Pedestrian
            } else if x < config.pedestrian_fraction + config.cyclist_fraction {
                AgentCategory::Cyclist
            } else {
                AgentCategory::Vehicle
            }
        };
        let branch = match leader_branch {
            Some(b) if idx == 0 => {
                if rng.random::<f64>() < config.follow_prob {
                    b
                } else {
                    sample_branch(&mut rng, &world.branch_probs)
                }
            }
            Some(b) if idx == leader_index => b,
            _ => sample_branch(&mut rng, &world.branch_probs),
        };
        if interested {
            trace.interested_branches.push((idx, branch));
        }
        let route = &world.routes[branch];
        let [v_lo, v_hi] = category_speed_range(cat);
        let speed = rng.random_range(v_lo..v_hi);
        let lateral = (rng.random::<f64>() * 2.0 - 1.0) * 1.5 * config.lateral_noise;
        let lateral = lateral.clamp(-0.45, 0.45);

        // Interested agents cross the branch point during the future window;
        // background agents start anywhere that keeps them on the route.
        let s0 = if world.branch_at > 0.0 && interested {
            let u = rng.random_range(0.2..0.6);
            world.branch_at - speed * dt * (t_hist as f64 + u * t_fut as f64)
        } else if leader_active && idx == leader_index {
            // Current state sits a few units into the turn.
            let progress = rng.random_range(2.0..6.0);
            world.branch_at + progress - speed * dt * t_hist as f64
        } else {
            let span = speed * dt * (t_hist + t_fut) as f64;
            rng.random_range(0.0..(route.length() - span).max(1.0))
        };

        let mut states = Vec::with_capacity(t_hist + t_fut);
        for step in 0..(t_hist + t_fut) {
            let s = s0 + speed * dt * step as f64;
            let (pos, tan) = route.sample(s);
            let normal = [-tan[1], tan[0]];
            let jx = rng.random_range(-1.0..1.0) * config.jitter;
            let jy = rng.random_range(-1.0..1.0) * config.jitter;
            states.push(AgentState {
                position: [
                    pos[0] + normal[0] * lateral + jx,
                    pos[1] + normal[1] * lateral + jy,
                ],
                size: category_size(cat),
                heading: wrap_angle(tan[1].atan2(tan[0])),
                velocity: [speed * tan[0], speed * tan[1]],
                valid: true,
            });
        }

        // Some background agents appear late or vanish early.
        let is_leader = leader_active && idx == leader_index;
        if !interested && !is_leader && rng.random::<f64>() < config.partial_track_prob {
            let cut_front = rng.random_range(0..t_hist.max(2) - 1);
            for s in states.iter_mut().take(cut_front) {
                *s = AgentState::invalid();
            }
            if rng.random::<f64>() < 0.5 {
                let cut_back = rng.random_range(1..t_fut);
                let total = t_hist + t_fut;
                for s in states.iter_mut().skip(total - cut_back) {
                    *s = AgentState::invalid();
                }
            }
        }

        let future = states.split_off(t_hist);
        agents.push(Agent {
            category: cat,
            history: states,
            future,
        });
    }

    let scenario = Scenario {
        agents,
        map: world.map,
        interested_ids: (0..n_interested).collect(),
        frame_period: dt,
    };
    scenario.validate()?;
    Ok((scenario, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = GeneratorConfig::default();
        let a = generate_synthetic_scenario(42, &cfg).unwrap();
        let b = generate_synthetic_scenario(42, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate_synthetic_scenario(43, &cfg).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn branch_frequencies_match_configured_probabilities() {
        let cfg = GeneratorConfig {
            template: LaneTemplate::Intersection {
                arms: 4,
                branch_probs: vec![0.5, 0.25, 0.25],
            },
            n_agents: 1,
            ..Default::default()
        };
        let mut counts = [0usize; 3];
        let n = 1000;
        for seed in 0..n {
            let (_, trace) = generate_with_trace(seed, &cfg).unwrap();
            counts[trace.interested_branches[0].1] += 1;
        }
        let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        for (f, p) in freqs.iter().zip([0.5, 0.25, 0.25]) {
            assert!(
                (f - p).abs() < 0.05,
                "branch frequency {f} deviates from {p} by more than 0.05"
            );
        }
    }

    #[test]
    fn straight_lane_endpoints_stay_near_centerline() {
        let cfg = GeneratorConfig {
            template: LaneTemplate::Straight { length: 60.0 },
            n_agents: 4,
            ..Default::default()
        };
        for seed in 0..50 {
            let s = generate_synthetic_scenario(seed, &cfg).unwrap();
            for a in &s.agents {
                if let Some(last) = a.future.iter().rev().find(|st| st.valid) {
                    assert!(
                        last.position[1].abs() < 1.0,
                        "endpoint lateral offset {} exceeds 1 unit",
                        last.position[1]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_agents_is_a_domain_error() {
        let cfg = GeneratorConfig {
            n_agents: 0,
            ..Default::default()
        };
        assert!(generate_synthetic_scenario(1, &cfg).is_err());
    }

    #[test]
    fn interested_agents_have_valid_tracks() {
        let cfg = GeneratorConfig::default();
        for seed in 0..20 {
            let s = generate_synthetic_scenario(seed, &cfg).unwrap();
            for &id in &s.interested_ids {
                assert!(s.agents[id].current().valid);
                assert!(s.agents[id].future.iter().all(|st| st.valid));
            }
        }
    }
}
