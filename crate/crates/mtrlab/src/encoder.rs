//! Scene context encoder: a transformer with k-NN local self-attention over
//! agent and map tokens, an auxiliary dense future prediction head for every
//! agent, and fusion of the predicted futures back into the agent features.
//!
//! Agents with no valid history are excluded from the token set (and from
//! all losses); their rows in the `[n_agents, d]` outputs stay zero.

use crate::autodiff::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::error::Result;
use crate::polyline::{sinusoidal_pe, PolylineEncoder, TokenFeatures};
use crate::scene::PolylineBatch;
use rand::Rng;
use std::rc::Rc;

/// k nearest tokens for every token by Euclidean distance, self included,
/// ties broken by lower index. `k` is clamped to the token count.
///
/// Returns the flattened neighbor list (row `i` owns entries
/// `i*k_eff .. (i+1)*k_eff`) and the effective `k`.
pub fn knn_token_graph(positions: &[[f64; 2]], k: usize) -> (Vec<usize>, usize) {
    let n = positions.len();
    assert!(n >= 1, "knn over an empty token set");
    let k_eff = k.clamp(1, n);
    let mut flat = Vec::with_capacity(n * k_eff);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for (i, p) in positions.iter().enumerate() {
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| {
            let da = (positions[a][0] - p[0]).powi(2) + (positions[a][1] - p[1]).powi(2);
            let db = (positions[b][0] - p[0]).powi(2) + (positions[b][1] - p[1]).powi(2);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        let _ = i;
        flat.extend_from_slice(&order[..k_eff]);
    }
    (flat, k_eff)
}

/// One pre-norm transformer encoder layer with local attention.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl EncoderLayer {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_width: usize,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::register(store, &format!("{name}.ln_attn"), d_model),
            attn: Attention::register(store, rng, &format!("{name}.attn"), d_model, d_model, heads),
            ln_ff: LayerNorm::register(store, &format!("{name}.ln_ff"), d_model),
            ff_in: Linear::register(store, rng, &format!("{name}.ff_in"), d_model, ffn_width),
            ff_out: Linear::register(store, rng, &format!("{name}.ff_out"), ffn_width, d_model),
        }
    }

    /// Queries and keys carry the token position encoding; values do not.
    pub fn apply(
        &self,
        g: &mut Graph,
        x: Var,
        pe: Var,
        neighbors: Rc<Vec<usize>>,
        k_eff: usize,
    ) -> Var {
        let h = self.ln_attn.apply(g, x);
        let src = g.add(h, pe);
        let attn_out = self.attn.grouped(g, src, src, h, neighbors, k_eff);
        let x = g.add(x, attn_out);
        let h2 = self.ln_ff.apply(g, x);
        let f = self.ff_in.apply(g, h2);
        let f = g.relu(f);
        let f = self.ff_out.apply(g, f);
        g.add(x, f)
    }
}

/// The full context encoder: token transformer plus dense-future machinery.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
    /// 3-layer head mapping each agent feature to `[t_future * 4]`
    /// (position and velocity offsets per future step).
    pub dense_head: Mlp,
    /// PointNet-style encoder over the predicted future states.
    pub future_encoder: PolylineEncoder,
    /// 3-layer fusion of `[past, future]` features back to `d_model`.
    pub fuse: Mlp,
    pub neighbor_k: usize,
    pub d_model: usize,
    pub t_future: usize,
}

impl ContextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        n_layers: usize,
        neighbor_k: usize,
        dense_hidden: usize,
        future_hidden: usize,
        t_future: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                EncoderLayer::register(store, rng, &format!("{name}.layer{i}"), d_model, heads, 4 * d_model)
            })
            .collect();
        let dense_head = Mlp::register(
            store,
            rng,
            &format!("{name}.dense_head"),
            &[d_model, dense_hidden, dense_hidden, t_future * 4],
            false,
        );
        // Offset head: start exactly on the constant-velocity rollout.
        dense_head.zero_output_layer(store);
        Self {
            layers,
            final_ln: LayerNorm::register(store, &format!("{name}.final_ln"), d_model),
            dense_head,
            future_encoder: PolylineEncoder::register(
                store,
                rng,
                &format!("{name}.future_enc"),
                4 + t_future,
                future_hidden,
                3,
                d_model,
            ),
            fuse: Mlp::register(
                store,
                rng,
                &format!("{name}.fuse"),
                &[2 * d_model, d_model, d_model, d_model],
                false,
            ),
            neighbor_k,
            d_model,
            t_future,
        }
    }
}

/// Encoder outputs consumed by the decoder and the objective.
pub struct ContextFeatures {
    /// `[n_agents, d]` agent features before future fusion; zero rows for
    /// agents with no valid history.
    pub agent_past: Var,
    /// `[n_agents, d]` encoded dense-future features (zero rows when the
    /// dense-future path is disabled or the agent is invalid).
    pub agent_future: Var,
    /// `[n_agents, d]` fused agent features.
    pub agent: Var,
    /// Fused features restricted to valid agents, `[n_valid, d]`.
    pub agent_valid_rows: Var,
    /// `[n_map, d]` map features.
    pub map: Var,
    /// Dense future prediction `[n_valid, t_future * 4]` in absolute
    /// agent-frame coordinates (position x, y then velocity x, y per step).
    pub dense_future: Option<Var>,
    /// Indices of valid agents in the original agent order.
    pub valid_idx: Vec<usize>,
    /// Latest positions of the valid agents (attention PE anchors).
    pub valid_positions: Vec<[f64; 2]>,
    pub map_centers: Vec<[f64; 2]>,
    /// Query-key pairs evaluated by each encoder layer.
    pub pairs_per_layer: Vec<u64>,
}

/// Run the local-attention encoder over the scene tokens, then predict and
/// fuse dense futures. `use_dense_future=false` zeroes the future path so
/// the fused features depend on the past features only.
pub fn encode_context(
    g: &mut Graph,
    tokens: &TokenFeatures,
    batch: &PolylineBatch,
    enc: &ContextEncoder,
    use_dense_future: bool,
) -> Result<ContextFeatures> {
    let valid_idx: Vec<usize> = (0..batch.n_agents).filter(|&i| batch.agent_valid[i]).collect();
    let n_valid = valid_idx.len();
    let n_map = batch.n_map;
    let d = enc.d_model;

    let agent_tokens = g.gather_rows(tokens.agent, Rc::new(valid_idx.clone()));
    let mut x = if n_map > 0 {
        g.concat_rows(agent_tokens, tokens.map)
    } else {
        agent_tokens
    };

    let mut positions: Vec<[f64; 2]> = valid_idx
        .iter()
        .map(|&i| batch.agent_last_position[i])
        .collect();
    positions.extend(batch.map_center.iter().copied());
    let pe = g.constant(sinusoidal_pe(&positions, d)?);

    let (flat, k_eff) = knn_token_graph(&positions, enc.neighbor_k);
    let neighbors = Rc::new(flat);
    let mut pairs_per_layer = Vec::with_capacity(enc.layers.len());
    for layer in &enc.layers {
        let before = g.qk_pairs();
        x = layer.apply(g, x, pe, neighbors.clone(), k_eff);
        pairs_per_layer.push(g.qk_pairs() - before);
    }
    x = enc.final_ln.apply(g, x);

    let agent_rows = g.slice_rows(x, 0, n_valid);
    let map = if n_map > 0 {
        g.slice_rows(x, n_valid, n_valid + n_map)
    } else {
        g.constant(Mat::zeros(0, d))
    };

    let scatter_idx = Rc::new(valid_idx.clone());
    let agent_past = g.scatter_rows(agent_rows, scatter_idx.clone(), batch.n_agents);

    let t = enc.t_future;
    let (dense_future, agent_future_rows) = if use_dense_future && n_valid > 0 {
        let offsets = enc.dense_head.apply(g, agent_rows);
        // The head emits offsets from a constant-velocity rollout of each
        // agent's latest state. Channel layout per step: [x, y, vx, vy].
        let dt = batch.frame_period;
        let base = Mat::from_fn(n_valid, t * 4, |r, c| {
            let ai = valid_idx[r];
            let vel = batch.agent_last_velocity[ai];
            let step = (c / 4 + 1) as f64;
            match c % 4 {
                0 => positions[r][0] + vel[0] * dt * step,
                1 => positions[r][1] + vel[1] * dt * step,
                2 => vel[0],
                _ => vel[1],
            }
        });
        let base = g.constant(base);
        let s_abs = g.add(offsets, base);

        let per_step = g.reshape(s_abs, n_valid * t, 4);
        let time_onehot = g.constant(Mat::from_fn(n_valid * t, t, |r, c| {
            if r % t == c {
                1.0
            } else {
                0.0
            }
        }));
        let fut_in = g.concat_cols(per_step, time_onehot);
        let mask = vec![true; n_valid * t];
        let fut = enc.future_encoder.encode(g, fut_in, t, &mask)?;
        (Some(s_abs), fut)
    } else {
        (None, g.constant(Mat::zeros(n_valid, d)))
    };

    let fused_in = g.concat_cols(agent_rows, agent_future_rows);
    let agent_valid_rows = enc.fuse.apply(g, fused_in);
    let agent = g.scatter_rows(agent_valid_rows, scatter_idx.clone(), batch.n_agents);
    let agent_future = g.scatter_rows(agent_future_rows, scatter_idx, batch.n_agents);

    Ok(ContextFeatures {
        agent_past,
        agent_future,
        agent,
        agent_valid_rows,
        map,
        dense_future,
        valid_idx,
        valid_positions: positions[..n_valid].to_vec(),
        map_centers: batch.map_center.clone(),
        pairs_per_layer,
    })
}
