//! Polyline encoders and sinusoidal position encoding.
//!
//! Each polyline (agent history or map chunk) is encoded by a per-point MLP
//! followed by a masked max-pool over the point axis and a linear projection
//! to the shared token width. Fully-masked polylines produce exact zero rows.

use crate::autodiff::nn::{Linear, Mlp};
use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scene::PolylineBatch;
use rand::Rng;

const PE_BASE: f64 = 10_000.0;

/// Geometrically spaced frequencies, `count` of them.
fn pe_frequencies(count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| PE_BASE.powf(-(i as f64) / count as f64))
        .collect()
}

/// Sinusoidal position encoding of 2-D points.
///
/// Output channels are `[sin(x w), cos(x w), sin(y w), cos(y w)]` with
/// `dim/4` frequencies per block; the x and y blocks are concatenated.
pub fn sinusoidal_pe(points: &[[f64; 2]], dim: usize) -> Result<Mat> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(format!(
            "position encoding dim {dim} must be a positive multiple of 4"
        )));
    }
    let q = dim / 4;
    let freqs = pe_frequencies(q);
    let mut out = Mat::zeros(points.len(), dim);
    for (r, p) in points.iter().enumerate() {
        let row = out.row_mut(r);
        for (i, &w) in freqs.iter().enumerate() {
            row[i] = (p[0] * w).sin();
            row[q + i] = (p[0] * w).cos();
            row[2 * q + i] = (p[1] * w).sin();
            row[3 * q + i] = (p[1] * w).cos();
        }
    }
    Ok(out)
}

/// Sinusoidal position encoding of a differentiable `[m, 2]` node; gradients
/// flow back into the points (used for dynamic searching queries).
pub fn sinusoidal_pe_var(g: &mut Graph, points: Var, dim: usize) -> Result<Var> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(format!(
            "position encoding dim {dim} must be a positive multiple of 4"
        )));
    }
    let (m, c) = g.shape(points);
    if c != 2 {
        return Err(Error::config(format!("expected [m, 2] points, got [{m}, {c}]")));
    }
    let q = dim / 4;
    let freq_row = g.constant(Mat::row_vec(pe_frequencies(q)));
    let x = g.slice_cols(points, 0, 1);
    let y = g.slice_cols(points, 1, 2);
    let xw = g.matmul(x, freq_row);
    let yw = g.matmul(y, freq_row);
    let sx = g.sin(xw);
    let cx = g.cos(xw);
    let sy = g.sin(yw);
    let cy = g.cos(yw);
    let xa = g.concat_cols(sx, cx);
    let ya = g.concat_cols(sy, cy);
    Ok(g.concat_cols(xa, ya))
}

/// PointNet-style polyline encoder: per-point MLP, masked max-pool,
/// linear projection to the token width.
#[derive(Clone, Debug)]
pub struct PolylineEncoder {
    pub point_mlp: Mlp,
    pub proj: Linear,
}

impl PolylineEncoder {
    /// `n_layers` affine+ReLU layers of width `hidden` over `c_in` channels,
    /// projected to `d_model`.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        hidden: usize,
        n_layers: usize,
        d_model: usize,
    ) -> Self {
        let mut widths = vec![c_in];
        widths.extend(std::iter::repeat(hidden).take(n_layers));
        Self {
            point_mlp: Mlp::register(store, rng, &format!("{name}.point"), &widths, true),
            proj: Linear::register(store, rng, &format!("{name}.proj"), hidden, d_model),
        }
    }

    /// Encode `[p * group, c_in]` points into `[p, d_model]` tokens.
    ///
    /// `mask[r]` marks valid point rows; groups with no valid point yield
    /// exact zero rows.
    pub fn encode(&self, g: &mut Graph, points: Var, group: usize, mask: &[bool]) -> Result<Var> {
        let (rows, c) = g.shape(points);
        if c != self.point_mlp.in_dim() {
            return Err(Error::config(format!(
                "polyline encoder expects {} channels, got {c}",
                self.point_mlp.in_dim()
            )));
        }
        if rows == 0 {
            return Ok(g.constant(Mat::zeros(0, self.proj.out_dim)));
        }
        assert_eq!(rows % group, 0);
        assert_eq!(mask.len(), rows);
        let h = self.point_mlp.apply(g, points);
        let pooled = g.masked_max_pool(h, group, mask);
        let projected = self.proj.apply(g, pooled);
        // The projection bias would leak into fully-masked rows; kill them.
        let p = rows / group;
        let keep = Mat::from_fn(p, 1, |r, _| {
            if mask[r * group..(r + 1) * group].iter().any(|&m| m) {
                1.0
            } else {
                0.0
            }
        });
        let keep = g.constant(keep);
        Ok(g.scale_rows(projected, keep))
    }
}

/// Token features produced by the two polyline encoders.
pub struct TokenFeatures {
    /// `[n_agents, d_model]`; zero rows for agents with no valid history.
    pub agent: Var,
    /// `[n_map, d_model]`.
    pub map: Var,
}

/// Agent and map polyline encoders sharing the output width.
#[derive(Clone, Debug)]
pub struct PolylineEncoderPair {
    pub agent: PolylineEncoder,
    pub map: PolylineEncoder,
}

impl PolylineEncoderPair {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_agent: usize,
        c_map: usize,
        agent_hidden: usize,
        map_hidden: usize,
        d_model: usize,
    ) -> Self {
        Self {
            agent: PolylineEncoder::register(
                store,
                rng,
                &format!("{name}.agent"),
                c_agent,
                agent_hidden,
                3,
                d_model,
            ),
            map: PolylineEncoder::register(
                store,
                rng,
                &format!("{name}.map"),
                c_map,
                map_hidden,
                5,
                d_model,
            ),
        }
    }
}

/// Encode a [`PolylineBatch`] into per-token features.
pub fn encode_polylines(
    g: &mut Graph,
    batch: &PolylineBatch,
    encoders: &PolylineEncoderPair,
) -> Result<TokenFeatures> {
    let agent_pts = g.constant(Mat::from_vec(
        batch.n_agents * batch.t_hist,
        batch.agent_channels,
        batch.agent_array.clone(),
    ));
    let map_pts = g.constant(Mat::from_vec(
        batch.n_map * batch.pts_per_polyline,
        batch.map_channels,
        batch.map_array.clone(),
    ));
    let agent = encoders
        .agent
        .encode(g, agent_pts, batch.t_hist, &batch.agent_mask)?;
    let map = if batch.n_map == 0 {
        g.constant(Mat::zeros(0, encoders.map.proj.out_dim))
    } else {
        encoders
            .map
            .encode(g, map_pts, batch.pts_per_polyline, &batch.map_mask)?
    };
    Ok(TokenFeatures { agent, map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, grad_agreement_error, Grads};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pe_at_origin_is_zero_sines_unit_cosines() {
        let pe = sinusoidal_pe(&[[0.0, 0.0]], 16).unwrap();
        let q = 4;
        for i in 0..q {
            assert_eq!(pe.get(0, i), 0.0);
            assert_eq!(pe.get(0, q + i), 1.0);
            assert_eq!(pe.get(0, 2 * q + i), 0.0);
            assert_eq!(pe.get(0, 3 * q + i), 1.0);
        }
    }

    #[test]
    fn pe_shape_and_divisibility() {
        let pts = vec![[1.0, 2.0]; 7];
        assert_eq!(sinusoidal_pe(&pts, 32).unwrap().shape(), (7, 32));
        assert!(sinusoidal_pe(&pts, 30).is_err());
        assert!(sinusoidal_pe(&pts, 0).is_err());
    }

    #[test]
    fn pe_distinguishes_distinct_points() {
        let pe = sinusoidal_pe(&[[1.5, -2.0], [1.4, -2.0]], 16).unwrap();
        let differs = (0..16).any(|c| (pe.get(0, c) - pe.get(1, c)).abs() > 1e-9);
        assert!(differs);
    }

    #[test]
    fn pe_var_matches_constant_kernel_and_is_differentiable() {
        let mut store = ParamStore::new();
        let pts = store.register("pts", Mat::from_vec(2, 2, vec![0.3, -1.2, 4.0, 2.5]));
        let eval = |store: &ParamStore| -> (f64, Grads, Mat) {
            let mut g = Graph::new(store);
            let p = g.param(pts);
            let pe = sinusoidal_pe_var(&mut g, p, 12).unwrap();
            let w = g.constant(Mat::from_fn(2, 12, |i, j| ((i + j) % 5) as f64 * 0.2 - 0.3));
            let prod = g.mul(pe, w);
            let loss = g.sum_all(prod);
            let v = g.value(loss).item();
            let pe_val = g.value(pe).clone();
            let grads = g.backward(loss);
            (v, grads, pe_val)
        };
        let (_, grads, pe_val) = eval(&store);
        let direct = sinusoidal_pe(&[[0.3, -1.2], [4.0, 2.5]], 12).unwrap();
        for (a, b) in pe_val.as_slice().iter().zip(direct.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for flat in 0..store.scalar_count() {
            let analytic = grads.flat_get(&store, flat);
            let numeric = central_difference(&mut store, flat, 1e-6, |s| eval(s).0);
            assert!(grad_agreement_error(analytic, numeric) < 1e-6);
        }
    }

    fn tiny_encoder(seed: u64) -> (ParamStore, PolylineEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = PolylineEncoder::register(&mut store, &mut rng, "enc", 3, 8, 3, 4);
        (store, enc)
    }

    fn run_encode(store: &ParamStore, enc: &PolylineEncoder, pts: Mat, group: usize, mask: &[bool]) -> Mat {
        let mut g = Graph::new(store);
        let x = g.constant(pts);
        let out = enc.encode(&mut g, x, group, mask).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn single_valid_point_equals_projected_mlp() {
        let (store, enc) = tiny_encoder(5);
        let point = vec![0.4, -0.2, 0.9];
        let padded = Mat::from_vec(3, 3, vec![0.4, -0.2, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let pooled = run_encode(&store, &enc, padded, 3, &[true, false, false]);
        let single = run_encode(&store, &enc, Mat::from_vec(1, 3, point), 1, &[true]);
        for (a, b) in pooled.as_slice().iter().zip(single.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn duplicated_points_do_not_change_output() {
        let (store, enc) = tiny_encoder(6);
        let base = Mat::from_vec(2, 3, vec![0.4, -0.2, 0.9, -0.6, 0.1, 0.3]);
        let dup = Mat::from_vec(
            4,
            3,
            vec![0.4, -0.2, 0.9, -0.6, 0.1, 0.3, 0.4, -0.2, 0.9, -0.6, 0.1, 0.3],
        );
        let a = run_encode(&store, &enc, base, 2, &[true, true]);
        let b = run_encode(&store, &enc, dup, 4, &[true; 4]);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn point_permutation_invariance() {
        use rand::seq::SliceRandom;
        let (store, enc) = tiny_encoder(7);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let base = run_encode(&store, &enc, Mat::from_vec(5, 3, flat), 5, &[true; 5]);
        for _ in 0..5 {
            let mut perm = rows.clone();
            perm.shuffle(&mut rng);
            let flat: Vec<f64> = perm.iter().flatten().copied().collect();
            let out = run_encode(&store, &enc, Mat::from_vec(5, 3, flat), 5, &[true; 5]);
            for (x, y) in base.as_slice().iter().zip(out.as_slice()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn adding_an_invalid_point_changes_nothing() {
        let (store, enc) = tiny_encoder(8);
        let base = Mat::from_vec(2, 3, vec![0.4, -0.2, 0.9, -0.6, 0.1, 0.3]);
        let extended = Mat::from_vec(
            3,
            3,
            vec![0.4, -0.2, 0.9, -0.6, 0.1, 0.3, 7.0, 7.0, 7.0],
        );
        let a = run_encode(&store, &enc, base, 2, &[true, true]);
        let b = run_encode(&store, &enc, extended, 3, &[true, true, false]);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn fully_masked_polyline_yields_zero_row() {
        let (store, enc) = tiny_encoder(9);
        let pts = Mat::from_vec(4, 3, vec![0.4, -0.2, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let out = run_encode(&store, &enc, pts, 2, &[true, false, false, false]);
        assert_eq!(out.shape(), (2, 4));
        assert!(out.row(1).iter().all(|&v| v == 0.0));
        assert!(out.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let (store, enc) = tiny_encoder(10);
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::zeros(2, 5));
        assert!(matches!(
            enc.encode(&mut g, x, 2, &[true, true]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let (mut store, enc) = tiny_encoder(11);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pts = Mat::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let mask = vec![true, true, false, true, true, true];

        let eval = |store: &ParamStore| -> (f64, Grads) {
            let mut g = Graph::new(store);
            let x = g.constant(pts.clone());
            let out = enc.encode(&mut g, x, 3, &mask).unwrap();
            let w = g.constant(Mat::from_fn(2, 4, |i, j| (i * 4 + j) as f64 * 0.21 - 0.4));
            let p = g.mul(out, w);
            let loss = g.sum_all(p);
            let v = g.value(loss).item();
            let grads = g.backward(loss);
            (v, grads)
        };
        let (_, grads) = eval(&store);
        let mut max_err: f64 = 0.0;
        for flat in 0..store.scalar_count() {
            let analytic = grads.flat_get(&store, flat);
            let numeric = central_difference(&mut store, flat, 1e-6, |s| eval(s).0);
            max_err = max_err.max(grad_agreement_error(analytic, numeric));
        }
        assert!(max_err < 1e-4, "max rel error {max_err}");
    }
}
