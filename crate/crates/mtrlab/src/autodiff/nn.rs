//! Parameterized building blocks: affine layers, MLPs, layer norm, and
//! multi-head attention in dense and grouped (per-query key set) forms.

use super::graph::{Graph, ParamId, ParamStore, Var};
use super::mat::Mat;
use rand::Rng;
use std::rc::Rc;

/// Affine layer `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        assert!(in_dim > 0 && out_dim > 0, "linear dims must be positive");
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Mat::from_fn(in_dim, out_dim, |_, _| rng.random_range(-limit..limit));
        Self {
            w: store.register(format!("{name}.w"), w),
            b: store.register(format!("{name}.b"), Mat::zeros(1, out_dim)),
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// Stack of affine layers with ReLU between them.
///
/// `relu_output` controls whether the final layer is also activated.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_output: bool,
}

impl Mlp {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        widths: &[usize],
        relu_output: bool,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::register(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self {
            layers,
            relu_output,
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, h);
            if i < last || self.relu_output {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Zero the final affine layer so the MLP initially outputs zeros
    /// (used by prediction heads that emit offsets from an anchor).
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let last = &self.layers[self.layers.len() - 1];
        *store.value_mut(last.w) = Mat::zeros(last.in_dim, last.out_dim);
        *store.value_mut(last.b) = Mat::zeros(1, last.out_dim);
    }
}

/// Learnable row-wise layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.register(format!("{name}.gamma"), Mat::from_fn(1, dim, |_, _| 1.0));
        let beta = store.register(format!("{name}.beta"), Mat::zeros(1, dim));
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Multi-head attention with separate query/key and value channel widths.
///
/// Query/key projections are square over `qk_in`, value/output over `v_in`;
/// this supports the decoder's concatenated `[content, position]` queries,
/// whose score channels are twice as wide as the value channels.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        qk_in: usize,
        v_in: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0, "attention needs at least one head");
        assert_eq!(qk_in % heads, 0, "query/key width must divide by head count");
        assert_eq!(v_in % heads, 0, "value width must divide by head count");
        Self {
            wq: Linear::register(store, rng, &format!("{name}.wq"), qk_in, qk_in),
            wk: Linear::register(store, rng, &format!("{name}.wk"), qk_in, qk_in),
            wv: Linear::register(store, rng, &format!("{name}.wv"), v_in, v_in),
            wo: Linear::register(store, rng, &format!("{name}.wo"), v_in, v_in),
            heads,
        }
    }

    /// Full attention of every query over every key.
    ///
    /// `q_src: [Q, qk_in]`, `k_src: [N, qk_in]`, `v_src: [N, v_in]` -> `[Q, v_in]`.
    pub fn dense(&self, g: &mut Graph, q_src: Var, k_src: Var, v_src: Var) -> Var {
        let q = self.wq.apply(g, q_src);
        let k = self.wk.apply(g, k_src);
        let v = self.wv.apply(g, v_src);
        let (nq, qk_dim) = g.shape(q);
        let (nk, v_dim) = g.shape(v);
        let dh = qk_dim / self.heads;
        let dv = v_dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        g.add_qk_pairs((nq * nk) as u64);

        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v, h * dv, (h + 1) * dv);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores);
            heads_out.push(g.matmul(weights, vh));
        }
        let merged = concat_all(g, &heads_out);
        self.wo.apply(g, merged)
    }

    /// Attention where query `i` attends to its own key set
    /// `idx[i*group .. (i+1)*group]` (rows into `k_src`/`v_src`).
    ///
    /// Used for k-NN local attention in the encoder and per-mode map
    /// attention in the decoder.
    pub fn grouped(
        &self,
        g: &mut Graph,
        q_src: Var,
        k_src: Var,
        v_src: Var,
        idx: Rc<Vec<usize>>,
        group: usize,
    ) -> Var {
        let nq = g.shape(q_src).0;
        assert_eq!(idx.len(), nq * group, "index list must be n_queries * group");
        let q = self.wq.apply(g, q_src);
        let k_all = self.wk.apply(g, k_src);
        let v_all = self.wv.apply(g, v_src);
        let k = g.gather_rows(k_all, idx.clone());
        let v = g.gather_rows(v_all, idx);
        let qk_dim = g.shape(q).1;
        let v_dim = g.shape(v).1;
        let dh = qk_dim / self.heads;
        let dv = v_dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        g.add_qk_pairs((nq * group) as u64);

        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v, h * dv, (h + 1) * dv);
            let q_rep = g.repeat_rows(qh, group);
            let prod = g.mul(q_rep, kh);
            let scores = g.row_sum(prod);
            let scores = g.scale(scores, scale);
            let scores = g.reshape(scores, nq, group);
            let weights = g.softmax_rows(scores);
            let w_flat = g.reshape(weights, nq * group, 1);
            let weighted = g.scale_rows(vh, w_flat);
            heads_out.push(g.group_sum_rows(weighted, group));
        }
        let merged = concat_all(g, &heads_out);
        self.wo.apply(g, merged)
    }
}

/// Concatenate a non-empty list of equal-row matrices along columns.
pub fn concat_all(g: &mut Graph, vars: &[Var]) -> Var {
    let mut it = vars.iter();
    let mut out = *it.next().expect("concat of empty list");
    for &v in it {
        out = g.concat_cols(out, v);
    }
    out
}
