//! Training loop: AdamW with decoupled weight decay, the step-wise learning
//! rate schedule, batching, checkpointing, and the finite-difference
//! gradient-check harness.
//!
//! Training is deterministic for a fixed `(seed, config, dataset)` when run
//! serially: batch order derives from the seed and epoch index alone, so a
//! resumed checkpoint reproduces the loss trajectory bit for bit.

use crate::autodiff::{central_difference, grad_agreement_error, Graph, Grads, Mat, ParamStore};
use crate::error::{Error, Result};
use crate::intention::{fnv1a_hex, IntentionPointSet};
use crate::model::{ModelConfig, ModelParts, MotionModel, Sample};
use crate::objective::AssignmentStrategy;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub strategy: AssignmentStrategy,
    pub model: ModelConfig,
    /// Hard cap on optimizer steps (handy for overfit runs); `None` runs
    /// `epochs` full passes.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Steps per schedule epoch; derived from the dataset when `None`.
    #[serde(default)]
    pub epoch_length: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            epochs: 30,
            weight_decay: 0.01,
            seed: 0,
            strategy: AssignmentStrategy::AlphaIntentionPoint,
            model: ModelConfig::desk(),
            max_steps: None,
            epoch_length: None,
        }
    }
}

/// Learning rate at a (0-indexed) epoch: halved at epochs 20, 22, 24, ...
pub fn lr_at_epoch(base_lr: f64, epoch: usize) -> f64 {
    if epoch < 20 {
        base_lr
    } else {
        base_lr * 0.5f64.powi(((epoch - 20) / 2 + 1) as i32)
    }
}

/// AdamW with decoupled weight decay: the decay is applied directly to the
/// parameters and never enters the gradient moments.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m = store.iter().map(|(_, _, p)| Mat::zeros(p.rows(), p.cols())).collect();
        let v = store.iter().map(|(_, _, p)| Mat::zeros(p.rows(), p.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for idx in 0..store.len() {
            let id = crate::autodiff::ParamId(idx);
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = store.value_mut(id);
            for i in 0..p.len() {
                let gi = g.as_slice()[i];
                let mi = self.beta1 * m.as_slice()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.as_slice()[i] + (1.0 - self.beta2) * gi * gi;
                m.as_mut_slice()[i] = mi;
                v.as_mut_slice()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let pi = p.as_slice()[i];
                p.as_mut_slice()[i] =
                    pi - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pi);
            }
        }
    }
}

/// One training log record, written as newline-delimited JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub classification: f64,
    pub auxiliary: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Serializable training state.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: Vec<(String, Mat)>,
    pub optimizer: AdamW,
    pub step: u64,
    pub epoch: usize,
    pub config: TrainConfig,
    pub config_hash: String,
    pub intention_fingerprint: String,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("checkpoint serialization");
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

pub fn config_hash(cfg: &TrainConfig) -> String {
    fnv1a_hex(serde_json::to_string(cfg).expect("config serialization").as_bytes())
}

/// Trainer state: model, optimizer, and step/epoch counters.
pub struct Trainer {
    pub model: MotionModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = MotionModel::new(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(&model.store, config.weight_decay);
        Ok(Self {
            model,
            optimizer,
            config,
            step: 0,
            epoch: 0,
        })
    }

    pub fn checkpoint(&self, intention_fingerprint: &str) -> Checkpoint {
        Checkpoint {
            params: self
                .model
                .store
                .iter()
                .map(|(_, name, value)| (name.to_string(), value.clone()))
                .collect(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            epoch: self.epoch,
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            intention_fingerprint: intention_fingerprint.to_string(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut model = MotionModel::new(ckpt.config.model.clone(), ckpt.config.seed)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::config("checkpoint parameter count mismatch"));
        }
        for (idx, (name, value)) in ckpt.params.iter().enumerate() {
            let id = crate::autodiff::ParamId(idx);
            if model.store.name(id) != name {
                return Err(Error::config(format!(
                    "checkpoint parameter {idx} is {name}, expected {}",
                    model.store.name(id)
                )));
            }
            *model.store.value_mut(id) = value.clone();
        }
        Ok(Self {
            model,
            optimizer: ckpt.optimizer,
            config: ckpt.config,
            step: ckpt.step,
            epoch: ckpt.epoch,
        })
    }

    fn steps_per_epoch(&self, n_samples: usize) -> usize {
        self.config
            .epoch_length
            .unwrap_or_else(|| n_samples.div_ceil(self.config.batch_size).max(1))
    }

    /// Deterministic sample order for one epoch.
    fn epoch_order(&self, epoch: usize, n_samples: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n_samples).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(0x9e3779b9).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    /// Run training until the epoch budget or `max_steps` is exhausted.
    /// `on_log` receives one record per optimizer step.
    pub fn run(
        &mut self,
        samples: &[Sample],
        intentions: &IntentionPointSet,
        mut on_log: impl FnMut(&LogRecord),
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::domain("no training samples"));
        }
        let started = Instant::now();
        let spe = self.steps_per_epoch(samples.len());
        let max_steps = self.config.max_steps.unwrap_or(u64::MAX);
        let total_epochs = self.config.epochs;

        while self.epoch < total_epochs && self.step < max_steps {
            let order = self.epoch_order(self.epoch, samples.len());
            for chunk_idx in 0..spe {
                if self.step >= max_steps {
                    break;
                }
                let lr = lr_at_epoch(self.config.lr, self.epoch);
                let mut merged = None::<Grads>;
                let mut loss_sum = 0.0;
                let mut nll_sum = 0.0;
                let mut cls_sum = 0.0;
                let mut aux_sum = 0.0;
                let start = (chunk_idx * self.config.batch_size) % samples.len();
                let batch: Vec<&Sample> = (0..self.config.batch_size)
                    .map(|i| &samples[order[(start + i) % samples.len()]])
                    .collect();

                for sample in &batch {
                    let mut g = Graph::new(&self.model.store);
                    let (loss, report, _) = self.model.parts().loss(
                        &mut g,
                        sample,
                        intentions,
                        self.config.strategy,
                    )?;
                    if !report.total.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            step: self.step,
                            detail: format!("sample agent {} report {report:?}", sample.agent_index),
                        });
                    }
                    loss_sum += report.total;
                    nll_sum += report.nll_per_layer.iter().sum::<f64>();
                    cls_sum += report.classification_per_layer.iter().sum::<f64>();
                    aux_sum += report.auxiliary;
                    let grads = g.backward(loss);
                    match &mut merged {
                        Some(m) => m.merge(&grads),
                        slot => *slot = Some(grads),
                    }
                }
                let mut grads = merged.expect("non-empty batch");
                let scale = 1.0 / batch.len() as f64;
                grads.scale(scale);
                if !grads.all_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: self.step,
                        detail: "non-finite gradients".into(),
                    });
                }
                self.optimizer.step(&mut self.model.store, &grads, lr);
                self.step += 1;

                on_log(&LogRecord {
                    step: self.step,
                    epoch: self.epoch,
                    loss: loss_sum * scale,
                    nll: nll_sum * scale,
                    classification: cls_sum * scale,
                    auxiliary: aux_sum * scale,
                    lr,
                    wall_time: started.elapsed().as_secs_f64(),
                });
            }
            self.epoch += 1;
        }
        Ok(())
    }
}

/// Gradient-check report: analytic tape vs central finite differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub eps: f64,
}

/// Check up to `max_params` randomly sampled parameter coordinates of the
/// full model loss against central differences.
pub fn grad_check_model(
    model: &mut MotionModel,
    sample: &Sample,
    intentions: &IntentionPointSet,
    strategy: AssignmentStrategy,
    max_params: usize,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport> {
    let parts = ModelParts {
        config: &model.config,
        polyline_encoders: &model.polyline_encoders,
        context_encoder: &model.context_encoder,
        decoder: &model.decoder,
    };
    let analytic = {
        let mut g = Graph::new(&model.store);
        let (loss, _, _) = parts.loss(&mut g, sample, intentions, strategy)?;
        g.backward(loss)
    };

    let n = model.store.scalar_count();
    let mut coords: Vec<usize> = (0..n).collect();
    if n > max_params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords = (0..max_params).map(|_| rng.random_range(0..n)).collect();
        coords.sort_unstable();
        coords.dedup();
    }

    let mut max_rel: f64 = 0.0;
    for &flat in &coords {
        let a = analytic.flat_get(&model.store, flat);
        let numeric = central_difference(&mut model.store, flat, eps, |s| {
            let mut g = Graph::new(s);
            let (loss, _, _) = parts
                .loss(&mut g, sample, intentions, strategy)
                .expect("forward must succeed during finite differences");
            g.value(loss).item()
        });
        max_rel = max_rel.max(grad_agreement_error(a, numeric));
    }
    Ok(GradCheckReport {
        n_checked: coords.len(),
        max_rel_error: max_rel,
        eps,
    })
}

/// Check the objective in isolation: raw GMM channels and logits are
/// themselves the parameters, so the tape under test is exactly the loss
/// composition.
pub fn grad_check_loss_only(seed: u64, eps: f64) -> Result<GradCheckReport> {
    use crate::objective::{auxiliary_l1, gaussian_nll_layer, DenseGt, GtFuture};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = 6;
    let k = 3;
    let mut store = ParamStore::new();
    let raw = store.register(
        "raw",
        Mat::from_fn(k, t * 5, |_, _| rng.random_range(-1.5..1.5)),
    );
    let logits = store.register("logits", Mat::from_fn(1, k, |_, _| rng.random_range(-1.0..1.0)));
    let dense = store.register("dense", Mat::from_fn(2, t * 4, |_, _| rng.random_range(-1.0..1.0)));

    let gt = GtFuture {
        positions: (0..t).map(|i| [i as f64 * 0.7, -(i as f64) * 0.3]).collect(),
        valid: (0..t).map(|i| i != 2).collect(),
    };
    let dense_gt = DenseGt {
        targets: Mat::from_fn(2, t * 4, |r, c| ((r + c) as f64 * 0.37).sin()),
        mask: Mat::from_fn(2, t * 4, |_, c| if c / 4 == 3 { 0.0 } else { 1.0 }),
        n_valid_steps: 2 * (t - 1),
    };

    let eval = |store: &ParamStore| -> (f64, Grads) {
        let mut g = Graph::new(store);
        let raw_v = g.param(raw);
        let logits_v = g.param(logits);
        let dense_v = g.param(dense);
        let (nll, cls) = gaussian_nll_layer(&mut g, raw_v, logits_v, 1, &gt).unwrap();
        let aux = auxiliary_l1(&mut g, dense_v, &dense_gt).unwrap();
        let s1 = g.add(nll, cls);
        let loss = g.add(s1, aux);
        let v = g.value(loss).item();
        let grads = g.backward(loss);
        (v, grads)
    };

    let (_, analytic) = eval(&store);
    let mut max_rel: f64 = 0.0;
    let n = store.scalar_count();
    for flat in 0..n {
        let a = analytic.flat_get(&store, flat);
        let numeric = central_difference(&mut store, flat, eps, |s| eval(s).0);
        max_rel = max_rel.max(grad_agreement_error(a, numeric));
    }
    Ok(GradCheckReport {
        n_checked: n,
        max_rel_error: max_rel,
        eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lr_schedule_fixtures() {
        assert_abs_diff_eq!(lr_at_epoch(1e-4, 0), 1e-4);
        assert_abs_diff_eq!(lr_at_epoch(1e-4, 19), 1e-4);
        assert_abs_diff_eq!(lr_at_epoch(1e-4, 20), 5e-5);
        assert_abs_diff_eq!(lr_at_epoch(1e-4, 21), 5e-5);
        assert_abs_diff_eq!(lr_at_epoch(1e-4, 22), 2.5e-5);
        assert_abs_diff_eq!(lr_at_epoch(1e-4, 25), 1.25e-5);
    }

    #[test]
    fn adamw_single_step_matches_hand_computation() {
        // Two parameters, one step, decoupled decay applied to the raw
        // parameter value rather than through the moments.
        let mut store = ParamStore::new();
        let p = store.register("p", Mat::from_vec(1, 2, vec![1.0, -2.0]));
        let mut opt = AdamW::new(&store, 0.1);
        let grads = {
            let mut g = Graph::new(&store);
            let pv = g.param(p);
            let w = g.constant(Mat::from_vec(1, 2, vec![3.0, -1.0]));
            let prod = g.mul(pv, w);
            let loss = g.sum_all(prod);
            g.backward(loss)
        };
        let lr = 0.01;
        opt.step(&mut store, &grads, lr);

        // Hand computation: g = [3, -1]; m_hat = g; v_hat = g^2;
        // update = lr*(g/|g| + wd*p) elementwise (eps negligible).
        let expect0 = 1.0 - lr * (3.0 / (3.0f64 + 1e-8) + 0.1 * 1.0);
        let expect1 = -2.0 - lr * (-1.0 / (1.0f64 + 1e-8) + 0.1 * -2.0);
        let got = store.value(p);
        assert_abs_diff_eq!(got.get(0, 0), expect0, epsilon = 1e-10);
        assert_abs_diff_eq!(got.get(0, 1), expect1, epsilon = 1e-10);
    }

    #[test]
    fn loss_only_gradients_are_tight() {
        let report = grad_check_loss_only(3, 1e-6).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "loss-only max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn zero_perturbation_changes_nothing() {
        let mut store = ParamStore::new();
        let p = store.register("p", Mat::from_vec(1, 2, vec![0.3, 0.7]));
        let orig = store.value(p).clone();
        let d = central_difference(&mut store, 0, 0.0_f64.max(1e-9), |s| {
            s.value(p).as_slice().iter().sum()
        });
        // Sum has unit gradient; the probe restores the original values.
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-6);
        assert_eq!(store.value(p), &orig);
    }
}
