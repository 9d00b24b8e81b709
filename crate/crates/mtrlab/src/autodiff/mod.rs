//! Minimal 64-bit reverse-mode autodiff used by the whole model stack.

mod graph;
mod mat;
pub mod nn;

pub use graph::{Grads, Graph, ParamId, ParamStore, Var};
pub use mat::{mat_mul, mat_mul_nt, mat_mul_tn, Mat};

/// Central finite-difference gradient of `f` with respect to flat parameter
/// coordinate `flat` of `store`, at step `eps`.
///
/// `f` must be a pure function of the store contents. This is the independent
/// oracle the analytic tape is checked against; it must never share code with
/// `Graph::backward`.
pub fn central_difference(
    store: &mut ParamStore,
    flat: usize,
    eps: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.flat_get(flat);
    store.flat_set(flat, orig + eps);
    let plus = f(store);
    store.flat_set(flat, orig - eps);
    let minus = f(store);
    store.flat_set(flat, orig);
    (plus - minus) / (2.0 * eps)
}

/// Relative error with a floor that keeps near-zero gradients from blowing up
/// the ratio: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Agreement error between an analytic and a central-difference gradient.
///
/// Central differences of a loss of magnitude ~1 carry roundoff noise around
/// `1e-16 / (2 eps)`; coordinates where both values sit below `1e-8` are
/// under that resolution and count as agreeing exactly.
pub fn grad_agreement_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-8 && numeric.abs() < 1e-8 {
        0.0
    } else {
        relative_error(analytic, numeric, 1e-6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn check_op(
        build: impl Fn(&mut Graph, Var) -> Var,
        rows: usize,
        cols: usize,
        seed: u64,
        tol: f64,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let pid = store.register("x", x);

        // Weighted sum so every output entry matters with a distinct weight.
        let eval = |store: &ParamStore| -> (f64, Grads) {
            let mut g = Graph::new(store);
            let xv = g.param(pid);
            let y = build(&mut g, xv);
            let (r, c) = g.shape(y);
            let w = g.constant(Mat::from_fn(r, c, |i, j| ((i * c + j) % 7) as f64 * 0.31 + 0.4));
            let prod = g.mul(y, w);
            let loss = g.sum_all(prod);
            let val = g.value(loss).item();
            let grads = g.backward(loss);
            (val, grads)
        };

        let (_, grads) = eval(&store);
        for flat in 0..store.scalar_count() {
            let analytic = grads.flat_get(&store, flat);
            let numeric = central_difference(&mut store, flat, 1e-6, |s| eval(s).0);
            let err = grad_agreement_error(analytic, numeric);
            assert!(
                err < tol,
                "op gradient mismatch at flat {flat}: analytic {analytic} vs numeric {numeric} (err {err})"
            );
        }
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        check_op(|g, x| g.relu(x), 3, 4, 1, 1e-7);
        check_op(|g, x| g.exp(x), 3, 4, 2, 1e-7);
        check_op(|g, x| g.tanh(x), 3, 4, 3, 1e-7);
        check_op(
            |g, x| {
                let y = g.add_const(x, 3.0);
                g.ln(y)
            },
            3,
            4,
            4,
            1e-7,
        );
        check_op(|g, x| g.abs(x), 3, 4, 5, 1e-7);
        check_op(|g, x| g.neg(x), 3, 4, 6, 1e-7);
        check_op(|g, x| g.clamp(x, -0.5, 0.5), 3, 4, 7, 1e-6);
        check_op(|g, x| g.scale(x, -2.5), 3, 4, 8, 1e-7);
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        check_op(|g, x| g.softmax_rows(x), 3, 5, 11, 1e-6);
        check_op(|g, x| g.row_logsumexp(x), 3, 5, 12, 1e-6);
        check_op(|g, x| g.row_sum(x), 3, 5, 13, 1e-7);
        check_op(|g, x| g.repeat_rows(x, 3), 2, 4, 14, 1e-7);
        check_op(|g, x| g.group_sum_rows(x, 2), 4, 3, 15, 1e-7);
        check_op(
            |g, x| g.gather_rows(x, Rc::new(vec![2, 0, 1, 2, 2])),
            3,
            4,
            16,
            1e-7,
        );
        check_op(
            |g, x| g.scatter_rows(x, Rc::new(vec![4, 1, 0]), 6),
            3,
            4,
            17,
            1e-7,
        );
        check_op(|g, x| g.slice_rows(x, 1, 3), 4, 3, 18, 1e-7);
        check_op(|g, x| g.slice_cols(x, 1, 3), 4, 4, 19, 1e-7);
        check_op(|g, x| g.reshape(x, 6, 2), 3, 4, 20, 1e-7);
        check_op(
            |g, x| {
                let a = g.slice_rows(x, 0, 2);
                let b = g.slice_rows(x, 2, 4);
                g.concat_cols(a, b)
            },
            4,
            3,
            21,
            1e-7,
        );
        check_op(
            |g, x| {
                let a = g.slice_rows(x, 0, 2);
                let b = g.slice_rows(x, 2, 4);
                g.concat_rows(a, b)
            },
            4,
            3,
            22,
            1e-7,
        );
        let mask = vec![true, false, true, true, true, false];
        check_op(move |g, x| g.masked_max_pool(x, 3, &mask), 6, 4, 23, 1e-6);
    }

    #[test]
    fn binary_and_matmul_gradients_match_finite_differences() {
        check_op(
            |g, x| {
                let a = g.slice_rows(x, 0, 2);
                let b = g.slice_rows(x, 2, 4);
                g.matmul_nt(a, b)
            },
            4,
            3,
            31,
            1e-6,
        );
        check_op(
            |g, x| {
                let a = g.slice_rows(x, 0, 2);
                let b = g.slice_rows(x, 2, 4);
                let m = g.mul(a, b);
                let s = g.sub(a, b);
                g.add(m, s)
            },
            4,
            3,
            32,
            1e-7,
        );
        check_op(
            |g, x| {
                let a = g.slice_rows(x, 0, 3);
                let s = g.slice_rows(x, 3, 4);
                let s = g.reshape(s, 3, 1);
                g.scale_rows(a, s)
            },
            4,
            3,
            33,
            1e-6,
        );
        check_op(
            |g, x| {
                let a = g.slice_rows(x, 0, 3);
                let b = g.slice_rows(x, 3, 4);
                g.add_row(a, b)
            },
            4,
            3,
            34,
            1e-7,
        );
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        let x = store.register("x", Mat::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0)));
        let gamma = store.register("gamma", Mat::from_fn(1, 6, |_, _| rng.random_range(0.5..1.5)));
        let beta = store.register("beta", Mat::from_fn(1, 6, |_, _| rng.random_range(-0.5..0.5)));

        let eval = |store: &ParamStore| -> (f64, Option<Grads>) {
            let mut g = Graph::new(store);
            let xv = g.param(x);
            let gv = g.param(gamma);
            let bv = g.param(beta);
            let y = g.layer_norm(xv, gv, bv, 1e-5);
            let w = g.constant(Mat::from_fn(3, 6, |i, j| (i + 2 * j) as f64 * 0.17 - 0.3));
            let p = g.mul(y, w);
            let loss = g.sum_all(p);
            let val = g.value(loss).item();
            (val, Some(g.backward(loss)))
        };

        let (_, grads) = eval(&store);
        let grads = grads.unwrap();
        for flat in 0..store.scalar_count() {
            let analytic = grads.flat_get(&store, flat);
            let numeric = central_difference(&mut store, flat, 1e-6, |s| eval(s).0);
            let err = grad_agreement_error(analytic, numeric);
            assert!(err < 1e-6, "layer_norm grad mismatch at {flat}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let attn = nn::Attention::register(&mut store, &mut rng, "attn", 8, 4, 2);
        let q_in = store.register("q_in", Mat::from_fn(3, 8, |_, _| rng.random_range(-1.0..1.0)));
        let kv_in = store.register("kv_in", Mat::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0)));
        let k_in = store.register("k_in", Mat::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0)));

        let idx = Rc::new(vec![0usize, 1, 2, 1, 2, 3, 2, 3, 4]);
        let eval = |store: &ParamStore, grouped: bool| -> (f64, Grads) {
            let mut g = Graph::new(store);
            let q = g.param(q_in);
            let k = g.param(k_in);
            let v = g.param(kv_in);
            let out = if grouped {
                attn.grouped(&mut g, q, k, v, idx.clone(), 3)
            } else {
                attn.dense(&mut g, q, k, v)
            };
            let w = g.constant(Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.13 + 0.05));
            let p = g.mul(out, w);
            let loss = g.sum_all(p);
            let val = g.value(loss).item();
            let grads = g.backward(loss);
            (val, grads)
        };

        for grouped in [false, true] {
            let (_, grads) = eval(&store, grouped);
            for flat in 0..store.scalar_count() {
                let analytic = grads.flat_get(&store, flat);
                let numeric =
                    central_difference(&mut store, flat, 1e-6, |s| eval(s, grouped).0);
                let err = grad_agreement_error(analytic, numeric);
                assert!(
                    err < 1e-6,
                    "attention (grouped={grouped}) grad mismatch at {flat}: {analytic} vs {numeric} (err {err})"
                );
            }
        }
    }
}
