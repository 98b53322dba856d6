//! Toy-scale training: adaptive-moment updates over the composite loss,
//! patch-based batching, a per-step loss trace, and held-out evaluation.
//!
//! Batches run forward/backward in parallel, one graph per patch, but all
//! random choices are drawn up front on the main thread and gradient
//! reduction walks the batch in index order — results are bit-identical
//! regardless of the worker count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{DtpError, Result};
use crate::metrics::{psnr, ssim, ImageMetrics, MetricsReport};
use crate::numerics::{capture_gradients, Graph, Tensor};
use crate::pipeline::data::{crop, Pair};
use crate::pipeline::model::DtpModel;
use crate::pipeline::thread_pool;

/// Optimization hyperparameters, lifted from the pipeline configuration.
#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub lr: f64,
    pub steps: usize,
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub patch: usize,
    pub batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainSettings {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        TrainSettings {
            lr: cfg.train_lr,
            steps: cfg.train_steps,
            lambda_rec: cfg.train_lambda_rec,
            lambda_kl: cfg.train_lambda_kl,
            patch: cfg.train_patch,
            batch: cfg.train_batch,
            seed: cfg.train_seed,
            beta1: cfg.train_beta1,
            beta2: cfg.train_beta2,
            eps: cfg.train_eps,
        }
    }
}

/// Loss values recorded at one step (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub band_prior: f64,
    /// Prior weight in effect, so the total can be recomputed from parts.
    pub applied_prior_weight: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<StepLoss>,
}

impl TrainReport {
    pub fn render_trace(&self) -> String {
        let mut out = String::from("step\ttotal\treconstruction\tband_prior\n");
        for (i, s) in self.trace.iter().enumerate() {
            out.push_str(&format!(
                "{i}\t{:.6}\t{:.6}\t{:.6}\n",
                s.total, s.reconstruction, s.band_prior
            ));
        }
        out
    }
}

struct AdamState {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl AdamState {
    fn new(model: &DtpModel<f32>) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .store
            .iter()
            .map(|(_, p)| p.value.shape().to_vec())
            .collect();
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// One adaptive-moment step over the learnable parameters, reading the
    /// gradients accumulated in the store.
    fn apply(&mut self, model: &mut DtpModel<f32>, s: &TrainSettings) {
        self.t += 1;
        let bias1 = 1.0 - s.beta1.powi(self.t as i32);
        let bias2 = 1.0 - s.beta2.powi(self.t as i32);
        for (slot, (_, p)) in model.store.iter_mut().enumerate() {
            if !p.learnable {
                continue;
            }
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let grads = p.grad.data();
            let mut updates = Vec::with_capacity(grads.len());
            for i in 0..grads.len() {
                let g = grads[i] as f64;
                let mi = s.beta1 * m[i] as f64 + (1.0 - s.beta1) * g;
                let vi = s.beta2 * v[i] as f64 + (1.0 - s.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                updates.push((s.lr * m_hat / (v_hat.sqrt() + s.eps)) as f32);
            }
            for (value, update) in p.value.data_mut().iter_mut().zip(updates) {
                *value -= update;
            }
        }
    }
}

/// Work item of one batch element: a matching patch pair.
fn sample_batch(
    data: &[Pair],
    patch: usize,
    scale: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let mut jobs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pair = &data[rng.gen_range(0..data.len())];
        let (lh, lw) = (pair.lr.shape()[0], pair.lr.shape()[1]);
        if lh < patch || lw < patch {
            return Err(DtpError::InvalidArgument(format!(
                "patch size {patch} exceeds low-resolution image {lh}x{lw}"
            )));
        }
        let y0 = rng.gen_range(0..=lh - patch);
        let x0 = rng.gen_range(0..=lw - patch);
        let lr = crop(&pair.lr, y0, x0, patch, patch)?;
        let hr = crop(
            &pair.hr,
            y0 * scale,
            x0 * scale,
            patch * scale,
            patch * scale,
        )?;
        jobs.push((lr, hr));
    }
    Ok(jobs)
}

struct SweepResult {
    total: f64,
    reconstruction: f64,
    band_prior: f64,
    applied_prior_weight: f64,
    capture: Vec<Option<Tensor<f32>>>,
}

fn backward_sweep(
    model: &DtpModel<f32>,
    lr: &Tensor<f32>,
    hr: &Tensor<f32>,
    settings: &TrainSettings,
) -> Result<SweepResult> {
    let mut g = Graph::new();
    let binding = model.store.bind(&mut g)?;
    let input = g.leaf(lr.clone())?;
    let target = g.leaf(hr.clone())?;
    let (_, terms) = model.training_loss(
        &mut g,
        &binding,
        input,
        target,
        settings.lambda_rec,
        settings.lambda_kl,
    )?;
    let grads = g.backward(terms.total)?;
    let capture = capture_gradients(&g, &grads, model.store.len());
    for tensor in capture.iter().flatten() {
        if !tensor.all_finite() {
            return Err(DtpError::NonFinite("parameter gradient".into()));
        }
    }
    Ok(SweepResult {
        total: g.value(terms.total).item()? as f64,
        reconstruction: g.value(terms.reconstruction).item()? as f64,
        band_prior: g.value(terms.band_prior).item()? as f64,
        applied_prior_weight: terms.applied_prior_weight,
        capture,
    })
}

/// Runs the configured number of steps. On a non-finite loss or gradient
/// the run aborts with the step index and the model keeps the last state
/// with finite parameters, so the caller can still checkpoint it.
pub fn train(
    model: &mut DtpModel<f32>,
    data: &[Pair],
    settings: &TrainSettings,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(DtpError::InvalidArgument(
            "training needs at least one pair".into(),
        ));
    }
    let scale = model.cfg.scale;
    let pool = thread_pool()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut adam = AdamState::new(model);
    let mut trace = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let jobs = sample_batch(data, settings.patch, scale, settings.batch, &mut rng)?;
        let sweeps: Result<Vec<SweepResult>> = pool.install(|| {
            jobs.par_iter()
                .map(|(lr, hr)| backward_sweep(model, lr, hr, settings))
                .collect()
        });
        let sweeps = match sweeps {
            Ok(s) => s,
            Err(DtpError::NonFinite(_)) => {
                return Err(DtpError::TrainingDiverged { step });
            }
            Err(e) => return Err(e),
        };
        let n = sweeps.len() as f64;
        let loss = StepLoss {
            total: sweeps.iter().map(|s| s.total).sum::<f64>() / n,
            reconstruction: sweeps.iter().map(|s| s.reconstruction).sum::<f64>() / n,
            band_prior: sweeps.iter().map(|s| s.band_prior).sum::<f64>() / n,
            applied_prior_weight: sweeps[0].applied_prior_weight,
        };
        if !loss.total.is_finite() {
            return Err(DtpError::TrainingDiverged { step });
        }
        model.store.zero_grads();
        let weight = 1.0 / sweeps.len() as f32;
        for sweep in &sweeps {
            model.store.accumulate_captured(&sweep.capture, weight);
        }
        let snapshot: Vec<Tensor<f32>> = model
            .store
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect();
        adam.apply(model, settings);
        let exploded = model.store.iter().any(|(_, p)| !p.value.all_finite());
        if exploded {
            for ((_, p), old) in model.store.iter_mut().zip(snapshot) {
                p.value = old;
            }
            return Err(DtpError::TrainingDiverged { step });
        }
        trace.push(loss);
    }
    Ok(TrainReport { trace })
}

/// Mean full-image reconstruction error of the model over a dataset —
/// the dataset-level counterpart of the per-step batch loss.
pub fn mean_l1(model: &DtpModel<f32>, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DtpError::InvalidArgument("empty evaluation set".into()));
    }
    let pool = thread_pool()?;
    let per_pair: Result<Vec<f64>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|pair| {
                let out = model.run(&pair.lr)?.output;
                if out.shape() != pair.hr.shape() {
                    return Err(DtpError::shape(
                        "prediction vs target",
                        out.shape(),
                        pair.hr.shape(),
                    ));
                }
                let n = out.len() as f64;
                Ok(out
                    .data()
                    .iter()
                    .zip(pair.hr.data())
                    .map(|(a, b)| (*a as f64 - *b as f64).abs())
                    .sum::<f64>()
                    / n)
            })
            .collect()
    });
    let per_pair = per_pair?;
    Ok(per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

/// Full-reference quality of the model on held-out pairs; evaluation is
/// parallel over images with index-ordered aggregation.
pub fn evaluate_model(model: &DtpModel<f32>, pairs: &[Pair]) -> Result<MetricsReport> {
    let pool = thread_pool()?;
    let per_image: Result<Vec<ImageMetrics>> = pool.install(|| {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let out = model.run(&pair.lr)?.output;
                Ok(ImageMetrics {
                    name: format!("pair{i:03}"),
                    psnr_db: psnr(&out, &pair.hr)?,
                    ssim: ssim(&out, &pair.hr)?,
                })
            })
            .collect()
    });
    MetricsReport::new(per_image?)
}
