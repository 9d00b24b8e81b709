//! Motion decoder with motion query pairs.
//!
//! Each of the K modes owns a static intention query (learnable embedding of
//! a fixed intention point) and a dynamic searching query (embedding of the
//! mode's current predicted endpoint, updated every layer). Decoder layers
//! run self-attention across modes, two cross-attentions over agent and
//! collected map features with concatenated `[content, position]` queries
//! and keys, and a per-layer GMM prediction head whose weights are not
//! shared across layers.

use crate::autodiff::nn::{Attention, LayerNorm, Mlp};
use crate::autodiff::{Graph, Mat, ParamId, ParamStore, Var};
use crate::encoder::ContextFeatures;
use crate::error::{Error, Result};
use crate::polyline::{sinusoidal_pe, sinusoidal_pe_var};
use crate::scene::CATEGORY_COUNT;
use rand::Rng;
use std::rc::Rc;

/// Clamp bounds for the raw log-sigma channels; keeps the NLL bounded below.
pub const SIGMA_RAW_MIN: f64 = -5.0;
pub const SIGMA_RAW_MAX: f64 = 5.0;
/// Correlation is squashed to `RHO_SCALE * tanh(raw)`.
pub const RHO_SCALE: f64 = 0.95;

/// Per-point channel count of the raw head output (before the mode logit).
pub const GAUSS_PARAMS: usize = 5;

/// How the decoder forms its queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    /// Motion query pairs anchored at fixed intention points.
    IntentionPoints,
    /// Free learnable query embeddings with no spatial anchor (ablation
    /// baseline). Positive-mode assignment must then use predicted
    /// trajectories rather than intention points.
    LatentLearnable,
}

/// A bivariate Gaussian over positions.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: f64,
}

impl Gaussian2 {
    /// Density with the full normalization constant.
    pub fn density(&self, o: [f64; 2]) -> Result<f64> {
        if self.rho.abs() >= 1.0 {
            return Err(Error::domain(format!("|rho| = {} must be < 1", self.rho.abs())));
        }
        if self.sigma[0] <= 0.0 || self.sigma[1] <= 0.0 {
            return Err(Error::domain("sigma must be positive"));
        }
        let dx = (o[0] - self.mean[0]) / self.sigma[0];
        let dy = (o[1] - self.mean[1]) / self.sigma[1];
        let one_m = 1.0 - self.rho * self.rho;
        let quad = (dx * dx + dy * dy - 2.0 * self.rho * dx * dy) / (2.0 * one_m);
        let norm = 2.0 * std::f64::consts::PI * self.sigma[0] * self.sigma[1] * one_m.sqrt();
        Ok((-quad).exp() / norm)
    }
}

/// Mixture density at a spatial position.
pub fn gmm_density(components: &[Gaussian2], probs: &[f64], o: [f64; 2]) -> Result<f64> {
    if components.len() != probs.len() {
        return Err(Error::config("component/probability count mismatch"));
    }
    let mut acc = 0.0;
    for (c, &p) in components.iter().zip(probs) {
        acc += p * c.density(o)?;
    }
    Ok(acc)
}

/// One decoder layer's Gaussian mixture output, extracted to plain data.
#[derive(Clone, Debug)]
pub struct GmmPrediction {
    pub n_modes: usize,
    pub t_future: usize,
    /// `[mode][step][mu_x, mu_y, sigma_x, sigma_y, rho]`, flattened.
    params: Vec<f64>,
    pub probs: Vec<f64>,
}

impl GmmPrediction {
    fn idx(&self, mode: usize, step: usize) -> usize {
        (mode * self.t_future + step) * GAUSS_PARAMS
    }

    pub fn mean(&self, mode: usize, step: usize) -> [f64; 2] {
        let i = self.idx(mode, step);
        [self.params[i], self.params[i + 1]]
    }

    pub fn component(&self, mode: usize, step: usize) -> Gaussian2 {
        let i = self.idx(mode, step);
        Gaussian2 {
            mean: [self.params[i], self.params[i + 1]],
            sigma: [self.params[i + 2], self.params[i + 3]],
            rho: self.params[i + 4],
        }
    }

    /// The mean sequence of one mode.
    pub fn trajectory(&self, mode: usize) -> Vec<[f64; 2]> {
        (0..self.t_future).map(|t| self.mean(mode, t)).collect()
    }

    pub fn endpoint(&self, mode: usize) -> [f64; 2] {
        self.mean(mode, self.t_future - 1)
    }

    /// Mixture density of the agent position at `step`.
    pub fn density_at(&self, step: usize, o: [f64; 2]) -> Result<f64> {
        let comps: Vec<Gaussian2> = (0..self.n_modes).map(|k| self.component(k, step)).collect();
        gmm_density(&comps, &self.probs, o)
    }
}

/// Rank map polylines by their minimum center distance to any waypoint and
/// return the nearest `l` indices (clamped to the polyline count), nearest
/// first, ties by lower index.
pub fn collect_map(map_centers: &[[f64; 2]], waypoints: &[[f64; 2]], l: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = map_centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let d = waypoints
                .iter()
                .map(|w| (c[0] - w[0]).powi(2) + (c[1] - w[1]).powi(2))
                .fold(f64::INFINITY, f64::min);
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(l.min(map_centers.len()));
    scored.into_iter().map(|(_, i)| i).collect()
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_agent: Attention,
    pub cross_map: Attention,
    pub merge: Mlp,
    pub head: Mlp,
}

impl DecoderLayer {
    fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
        head_hidden: usize,
        t_future: usize,
    ) -> Self {
        let head = Mlp::register(
            store,
            rng,
            &format!("{name}.head"),
            &[d, head_hidden, head_hidden, t_future * GAUSS_PARAMS + 1],
            false,
        );
        // The head emits offsets from the layer's trajectory anchor; start
        // exactly on the anchor with unit sigmas and zero correlation.
        head.zero_output_layer(store);
        Self {
            ln_self: LayerNorm::register(store, &format!("{name}.ln_self"), d),
            self_attn: Attention::register(store, rng, &format!("{name}.self_attn"), d, d, heads),
            ln_cross: LayerNorm::register(store, &format!("{name}.ln_cross"), d),
            cross_agent: Attention::register(store, rng, &format!("{name}.cross_agent"), 2 * d, d, heads),
            cross_map: Attention::register(store, rng, &format!("{name}.cross_map"), 2 * d, d, heads),
            merge: Mlp::register(store, rng, &format!("{name}.merge"), &[2 * d, d, d], false),
            head,
        }
    }
}

/// Learnable query embeddings for one agent category.
#[derive(Clone, Debug)]
pub struct CategoryQueries {
    /// Static intention query embedding over `PE(intention point)`.
    pub intention_embed: Mlp,
    /// Dynamic searching query embedding over `PE(endpoint)`; shared across
    /// decoder layers.
    pub search_embed: Mlp,
    /// Free `[K, d]` query table for the latent-learnable baseline.
    pub latent: ParamId,
}

#[derive(Clone, Debug)]
pub struct MotionDecoder {
    pub layers: Vec<DecoderLayer>,
    pub queries: Vec<CategoryQueries>,
    pub n_modes: usize,
    pub t_future: usize,
    pub d_model: usize,
    /// Number of map polylines collected along each mode's trajectory.
    pub map_collect: usize,
    pub query_mode: QueryMode,
    /// When false, searching queries stay at their initial embedding and map
    /// cross-attention sees every polyline (no dynamic collection).
    pub local_refinement: bool,
}

impl MotionDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
        n_layers: usize,
        n_modes: usize,
        t_future: usize,
        map_collect: usize,
        head_hidden: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::register(store, rng, &format!("{name}.layer{i}"), d, heads, head_hidden, t_future))
            .collect();
        let queries = (0..CATEGORY_COUNT)
            .map(|c| {
                let limit = (1.0 / d as f64).sqrt();
                CategoryQueries {
                    intention_embed: Mlp::register(
                        store,
                        rng,
                        &format!("{name}.cat{c}.intent"),
                        &[d, d, d],
                        false,
                    ),
                    search_embed: Mlp::register(
                        store,
                        rng,
                        &format!("{name}.cat{c}.search"),
                        &[d, d, d],
                        false,
                    ),
                    latent: store.register(
                        format!("{name}.cat{c}.latent"),
                        Mat::from_fn(n_modes, d, |_, _| rng.random_range(-limit..limit)),
                    ),
                }
            })
            .collect();
        Self {
            layers,
            queries,
            n_modes,
            t_future,
            d_model: d,
            map_collect,
            query_mode: QueryMode::IntentionPoints,
            local_refinement: true,
        }
    }
}

/// Output of one decoder layer, keeping the differentiable handles alongside
/// the extracted mixture.
pub struct LayerPrediction {
    /// `[K, t_future * 5]` raw Gaussian channels
    /// (`mu_x, mu_y, raw_sx, raw_sy, raw_rho` per step).
    pub raw: Var,
    /// `[1, K]` mode logits.
    pub logits: Var,
    /// `[K, 2]` predicted endpoints (mean of the final step).
    pub endpoint: Var,
    pub gmm: GmmPrediction,
}

fn extract_gmm(g: &Graph, raw: Var, logits: Var, n_modes: usize, t_future: usize) -> GmmPrediction {
    let rv = g.value(raw);
    let mut params = Vec::with_capacity(n_modes * t_future * GAUSS_PARAMS);
    for k in 0..n_modes {
        for t in 0..t_future {
            let base = t * GAUSS_PARAMS;
            let mu_x = rv.get(k, base);
            let mu_y = rv.get(k, base + 1);
            let sx = rv.get(k, base + 2).clamp(SIGMA_RAW_MIN, SIGMA_RAW_MAX).exp();
            let sy = rv.get(k, base + 3).clamp(SIGMA_RAW_MIN, SIGMA_RAW_MAX).exp();
            let rho = RHO_SCALE * rv.get(k, base + 4).tanh();
            params.extend_from_slice(&[mu_x, mu_y, sx, sy, rho]);
        }
    }
    let lv = g.value(logits);
    let mx = lv.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = lv.as_slice().iter().map(|&v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    GmmPrediction {
        n_modes,
        t_future,
        params,
        probs: exps.into_iter().map(|e| e / sum).collect(),
    }
}

/// Run the stacked decoder for one interested agent.
///
/// `intention_points` are the fitted anchors for the agent's category (must
/// match the configured mode count when intention queries are active).
pub fn decode(
    g: &mut Graph,
    ctx: &ContextFeatures,
    intention_points: &[[f64; 2]],
    dec: &MotionDecoder,
    category_index: usize,
    cv_rollout: &[[f64; 2]],
) -> Result<Vec<LayerPrediction>> {
    let k_modes = dec.n_modes;
    let d = dec.d_model;
    let t_fut = dec.t_future;
    if dec.query_mode == QueryMode::IntentionPoints && intention_points.len() != k_modes {
        return Err(Error::config(format!(
            "decoder expects {k_modes} intention points for category {category_index}, got {}",
            intention_points.len()
        )));
    }
    let queries = dec
        .queries
        .get(category_index)
        .ok_or_else(|| Error::config(format!("no query set for category {category_index}")))?;

    // Static intention query and initial searching query.
    let (q_intent, mut q_search) = match dec.query_mode {
        QueryMode::IntentionPoints => {
            let pe = g.constant(sinusoidal_pe(intention_points, d)?);
            let qi = queries.intention_embed.apply(g, pe);
            let qs = queries.search_embed.apply(g, pe);
            (qi, qs)
        }
        QueryMode::LatentLearnable => {
            let qi = g.param(queries.latent);
            (qi, qi)
        }
    };

    let n_valid = ctx.valid_idx.len();
    let n_map = ctx.map_centers.len();
    let agent_pe = g.constant(sinusoidal_pe(&ctx.valid_positions, d)?);
    let agent_keys = g.concat_cols(ctx.agent_valid_rows, agent_pe);
    let (map_keys, map_feats) = if n_map > 0 {
        let map_pe = g.constant(sinusoidal_pe(&ctx.map_centers, d)?);
        (Some(g.concat_cols(ctx.map, map_pe)), Some(ctx.map))
    } else {
        (None, None)
    };

    let mut content = g.constant(Mat::zeros(k_modes, d));
    // Waypoints steering the first layer's map collection: the intention
    // points themselves, or the agent's constant-velocity rollout for
    // anchor-free latent queries.
    let mut mode_waypoints: Vec<Vec<[f64; 2]>> = match dec.query_mode {
        QueryMode::IntentionPoints => intention_points.iter().map(|&p| vec![p]).collect(),
        QueryMode::LatentLearnable => vec![cv_rollout.to_vec(); k_modes],
    };

    // Layer-1 mean anchor: a constant-velocity ramp from the origin to each
    // mode's intention point. Later layers anchor on the previous layer's
    // predicted trajectory, making each head an offset-based refiner.
    let first_anchor = match dec.query_mode {
        QueryMode::IntentionPoints => {
            let mut m = Mat::zeros(k_modes, t_fut * GAUSS_PARAMS);
            for (k, p) in intention_points.iter().enumerate() {
                for t in 0..t_fut {
                    let frac = (t + 1) as f64 / t_fut as f64;
                    m.set(k, t * GAUSS_PARAMS, p[0] * frac);
                    m.set(k, t * GAUSS_PARAMS + 1, p[1] * frac);
                }
            }
            Some(g.constant(m))
        }
        // Latent queries carry no spatial prior: the first layer regresses
        // absolute coordinates.
        QueryMode::LatentLearnable => None,
    };
    let mu_mask = g.constant(Mat::from_fn(k_modes, t_fut * GAUSS_PARAMS, |_, c| {
        if c % GAUSS_PARAMS < 2 {
            1.0
        } else {
            0.0
        }
    }));
    let mut prev_raw: Option<Var> = None;

    let mut out = Vec::with_capacity(dec.layers.len());
    for layer in &dec.layers {
        // Self-attention across modes; intention query as position embedding.
        let h = layer.ln_self.apply(g, content);
        let qk = g.add(h, q_intent);
        let sa = layer.self_attn.dense(g, qk, qk, h);
        let c_sa = g.add(content, sa);

        // Cross-attention with decoupled [content, position] channels.
        let h2 = layer.ln_cross.apply(g, c_sa);
        let q_cross = g.concat_cols(h2, q_search);
        let c_agent = if n_valid > 0 {
            layer.cross_agent.dense(g, q_cross, agent_keys, ctx.agent_valid_rows)
        } else {
            g.constant(Mat::zeros(k_modes, d))
        };
        let c_map = match (map_keys, map_feats) {
            (Some(keys), Some(feats)) if dec.local_refinement => {
                let l_eff = dec.map_collect.min(n_map);
                let mut flat = Vec::with_capacity(k_modes * l_eff);
                for wps in &mode_waypoints {
                    flat.extend(collect_map(&ctx.map_centers, wps, l_eff));
                }
                layer
                    .cross_map
                    .grouped(g, q_cross, keys, feats, Rc::new(flat), l_eff)
            }
            (Some(keys), Some(feats)) => layer.cross_map.dense(g, q_cross, keys, feats),
            _ => g.constant(Mat::zeros(k_modes, d)),
        };

        let merged_in = g.concat_cols(c_agent, c_map);
        let merged = layer.merge.apply(g, merged_in);
        content = g.add(c_sa, merged);

        // Per-layer prediction head (weights not shared across layers).
        let head_out = layer.head.apply(g, content);
        let offsets = g.slice_cols(head_out, 0, t_fut * GAUSS_PARAMS);
        let raw = match (prev_raw, first_anchor) {
            (Some(prev), _) => {
                let anchor = g.mul(prev, mu_mask);
                g.add(offsets, anchor)
            }
            (None, Some(anchor)) => g.add(offsets, anchor),
            (None, None) => offsets,
        };
        prev_raw = Some(raw);
        let logits_col = g.slice_cols(head_out, t_fut * GAUSS_PARAMS, t_fut * GAUSS_PARAMS + 1);
        let logits = g.reshape(logits_col, 1, k_modes);
        let endpoint = g.slice_cols(raw, (t_fut - 1) * GAUSS_PARAMS, (t_fut - 1) * GAUSS_PARAMS + 2);
        let gmm = extract_gmm(g, raw, logits, k_modes, t_fut);

        if dec.local_refinement {
            // Next layer's searching query embeds the fresh endpoints, and
            // map collection follows the whole predicted trajectory.
            let pe = sinusoidal_pe_var(g, endpoint, d)?;
            q_search = queries.search_embed.apply(g, pe);
            mode_waypoints = (0..k_modes).map(|k| gmm.trajectory(k)).collect();
        }

        out.push(LayerPrediction {
            raw,
            logits,
            endpoint,
            gmm,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_standard_normal_density_at_mean() {
        let gauss = Gaussian2 {
            mean: [0.0, 0.0],
            sigma: [1.0, 1.0],
            rho: 0.0,
        };
        let d = gmm_density(&[gauss], &[1.0], [0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(d, 1.0 / (2.0 * std::f64::consts::PI), epsilon = 1e-12);
    }

    #[test]
    fn symmetric_two_component_mixture() {
        let a = Gaussian2 {
            mean: [-1.0, 0.0],
            sigma: [1.0, 1.0],
            rho: 0.0,
        };
        let b = Gaussian2 {
            mean: [1.0, 0.0],
            sigma: [1.0, 1.0],
            rho: 0.0,
        };
        let at_origin = gmm_density(&[a, b], &[0.5, 0.5], [0.0, 0.0]).unwrap();
        let single = a.density([0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(at_origin, single, epsilon = 1e-12);
    }

    #[test]
    fn invalid_rho_is_a_domain_error() {
        let g = Gaussian2 {
            mean: [0.0, 0.0],
            sigma: [1.0, 1.0],
            rho: 1.0,
        };
        assert!(g.density([0.0, 0.0]).is_err());
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        let comps = [
            Gaussian2 {
                mean: [0.5, -0.3],
                sigma: [0.8, 1.2],
                rho: 0.4,
            },
            Gaussian2 {
                mean: [-1.0, 0.8],
                sigma: [1.1, 0.6],
                rho: -0.3,
            },
        ];
        let probs = [0.7, 0.3];
        let (lo, hi, n) = (-12.0, 12.0, 240);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = lo + (i as f64 + 0.5) * h;
                let y = lo + (j as f64 + 0.5) * h;
                total += gmm_density(&comps, &probs, [x, y]).unwrap() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-2, "grid integral {total}");
    }

    #[test]
    fn collect_map_ranks_by_min_waypoint_distance() {
        let centers = [[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]];
        let trajectory: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, 0.0]).collect();
        assert_eq!(collect_map(&centers, &trajectory, 2), vec![0, 1]);
        // l >= n keeps everything, sorted by distance.
        assert_eq!(collect_map(&centers, &[[19.0, 0.0]], 10), vec![2, 1, 0]);
        // Ties resolve to the lower index.
        let tied = [[1.0, 0.0], [-1.0, 0.0]];
        assert_eq!(collect_map(&tied, &[[0.0, 0.0]], 1), vec![0]);
    }
}
