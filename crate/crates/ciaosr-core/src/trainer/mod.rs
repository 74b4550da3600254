//! Training loop (L1 + Adam + stepped LR decay), checkpointing, and the
//! evaluation sweep that scores a model against its bicubic baseline.

pub mod checkpoint;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::local::QueryBatch;
use crate::coords::Scale;
use crate::data::resize::bicubic_resize;
use crate::data::sample::{sample_training_pair, DegradationConfig};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, MetricConfig};
use crate::model::SrModel;
use crate::nn::{ParamSet, ParamVars};
use crate::rng::{hash_name, SeedRng};
use crate::tensor::{Tape, Tensor};
use checkpoint::{save_checkpoint, Checkpoint};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    /// Epochs between LR decays.
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub degradation: DegradationConfig,
}

impl TrainConfig {
    /// Full-scale schedule: 1000 epochs, batch 16, LR 1e-4 halved every 200.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 1000,
            iters_per_epoch: 1000,
            batch_size: 16,
            lr0: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 200,
            seed: 0,
            grad_clip: 5.0,
            degradation: DegradationConfig::default(),
        }
    }

    /// Minutes-scale preset for a single CPU core; pairs with
    /// `ModelConfig::desk()`. Smaller patches and a hotter LR so the loss
    /// moves visibly within the step budget.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 24,
            iters_per_epoch: 300,
            batch_size: 4,
            lr0: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_every: 6,
            seed: 0,
            grad_clip: 5.0,
            degradation: DegradationConfig { patch_lr: 12, ..DegradationConfig::default() },
        }
    }
}

/// Stepped decay as a pure function of the epoch index.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_log: Vec<LossRow>,
    pub final_loss: f64,
    /// Mean loss over the first (up to) 10 steps — the reference level for
    /// "did training move" checks.
    pub first10_avg: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    out
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(lens: &[usize]) -> Self {
        Adam {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}

fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g {
                *x *= scale;
            }
        }
    }
}

/// One optimization step on a freshly sampled batch; returns the loss.
fn train_step(
    model: &mut SrModel<f32>,
    adam: &mut Adam,
    images: &[Tensor<f32>],
    deg: &DegradationConfig,
    rng: &mut SeedRng,
    lr: f64,
    batch_size: usize,
    grad_clip: f64,
) -> f64 {
    // A diverged step leaves non-finite weights behind; catch that here so
    // the failure surfaces as an error with a step number rather than a
    // panic inside the next forward pass.
    if !model.params.tensors().iter().all(|t| t.is_finite()) {
        return f64::NAN;
    }
    let p = deg.patch_lr;
    let m_per = p * p;
    let mut lr_data = Vec::with_capacity(batch_size * 3 * p * p);
    let mut coords = Vec::with_capacity(batch_size * m_per);
    let mut scales: Vec<Scale> = Vec::with_capacity(batch_size);
    let mut gt = Vec::with_capacity(batch_size * m_per * 3);
    for _ in 0..batch_size {
        let img = &images[rng.below(images.len())];
        let ps = sample_training_pair(img, deg, rng);
        lr_data.extend_from_slice(ps.lr_patch.data());
        coords.extend_from_slice(&ps.query_coords);
        scales.push(ps.scale);
        gt.extend_from_slice(&ps.gt_rgb);
    }

    let mut tape: Tape<f32> = Tape::new();
    let pv = ParamVars::leaf_all(&model.params, &mut tape, true);
    let lr_var = tape.leaf(Tensor::new(vec![batch_size, 3, p, p], lr_data), false);
    let batch = QueryBatch { coords: &coords, per_sample: m_per, scales: &scales };
    let out = model.forward_rows(&mut tape, &pv, lr_var, &batch);
    let gt_var = tape.leaf(Tensor::new(vec![batch_size * m_per, 3], gt), false);
    let diff = tape.sub(out.rgb, gt_var);
    let absd = tape.abs(diff);
    let loss = tape.mean_all(absd);
    let loss_val = tape.value(loss).data()[0] as f64;
    if !loss_val.is_finite() {
        return loss_val; // caller reports the step
    }

    let grads = tape.backward(loss);
    let mut gvec: Vec<Option<Vec<f64>>> = pv
        .all()
        .iter()
        .map(|&v| grads.get(v).map(|g| g.iter().map(|&x| x as f64).collect()))
        .collect();
    clip_global_norm(&mut gvec, grad_clip);
    adam.step(&mut model.params, &gvec, lr);
    loss_val
}

/// Run the full schedule: per step, sample a batch, render at the sampled
/// query coordinates, take an L1/Adam step. The checkpoint at `ckpt_path`
/// is rewritten after every epoch and once more at the end, so a zero-epoch
/// run snapshots the initialization.
pub fn train(
    model: &mut SrModel<f32>,
    images: &[Tensor<f32>],
    cfg: &TrainConfig,
    ckpt_path: Option<&Path>,
) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(Error::InvalidArg("training set is empty".to_string()));
    }
    let mut adam = Adam::new(&model.params.lens());
    let mut rows = Vec::with_capacity(cfg.epochs * cfg.iters_per_epoch);
    let step_domain = hash_name("train-step");
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        for _ in 0..cfg.iters_per_epoch {
            let mut rng =
                SeedRng::from_seed(cfg.seed).split(step_domain.wrapping_add(step));
            let loss = train_step(
                model,
                &mut adam,
                images,
                &cfg.degradation,
                &mut rng,
                lr,
                cfg.batch_size,
                cfg.grad_clip,
            );
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            rows.push(LossRow { step, lr, loss });
            step += 1;
        }
        if let Some(path) = ckpt_path {
            save_checkpoint(path, &Checkpoint::from_model(model, step, cfg.seed))?;
        }
    }
    if let Some(path) = ckpt_path {
        save_checkpoint(path, &Checkpoint::from_model(model, step, cfg.seed))?;
    }
    let first10 = rows.iter().take(10).map(|r| r.loss).sum::<f64>()
        / rows.len().min(10).max(1) as f64;
    Ok(TrainReport {
        final_loss: rows.last().map_or(f64::NAN, |r| r.loss),
        first10_avg: if rows.is_empty() { f64::NAN } else { first10 },
        loss_log: rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub scale: f64,
    pub images: usize,
    pub psnr_rgb: f64,
    pub psnr_y: f64,
    pub ssim: f64,
    pub bicubic_psnr_rgb: f64,
    pub bicubic_psnr_y: f64,
    pub bicubic_ssim: f64,
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out =
        String::from("scale,images,psnr_rgb,psnr_y,ssim,bicubic_psnr_rgb,bicubic_psnr_y,bicubic_ssim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.scale,
            r.images,
            r.psnr_rgb,
            r.psnr_y,
            r.ssim,
            r.bicubic_psnr_rgb,
            r.bicubic_psnr_y,
            r.bicubic_ssim
        ));
    }
    out
}

/// Degrade each ground-truth image by `scale` (bicubic), super-resolve back
/// to the original size, and report per-scale mean metrics next to the
/// bicubic-upsampling baseline. A scale whose LR side would drop below 8 px
/// skips that image with a warning; a no-op degradation (LR size equals GT
/// size) takes the identity path and scores the +∞ PSNR sentinel.
pub fn evaluate(
    model: &SrModel<f32>,
    images: &[Tensor<f32>],
    scales: &[f64],
) -> Result<Vec<EvalRow>> {
    if images.is_empty() {
        return Err(Error::InvalidArg("evaluation set is empty".to_string()));
    }
    let mut rows = Vec::new();
    for &s in scales {
        if s < 1.0 {
            return Err(Error::InvalidArg(format!("evaluation scale {s} must be >= 1")));
        }
        let mut sums = [0.0f64; 6];
        let mut n = 0usize;
        for (i, gt) in images.iter().enumerate() {
            let (h, w) = (gt.shape()[1], gt.shape()[2]);
            let (lh, lw) = (((h as f64 / s).round() as usize).max(1), ((w as f64 / s).round() as usize).max(1));
            if lh < 8 || lw < 8 {
                eprintln!(
                    "warning: image {i} at scale {s} would give a {lh}x{lw} LR input (< 8 px); skipped"
                );
                continue;
            }
            let identity = (lh, lw) == (h, w);
            // Scoring happens in image space, so both reconstructions are
            // clamped to the displayable range first.
            let clamp01 = |t: Tensor<f32>| t.map(|v| v.clamp(0.0, 1.0));
            let lr = if identity { gt.clone() } else { bicubic_resize(gt, lh, lw) };
            let sr = if identity { lr.clone() } else { clamp01(model.render_image(&lr, h, w)) };
            let bic = if identity { lr.clone() } else { clamp01(bicubic_resize(&lr, h, w)) };

            let rgb_cfg = MetricConfig::rgb();
            let y_cfg = MetricConfig::y_for_scale(s);
            for (k, img) in [(0, &sr), (3, &bic)] {
                sums[k] += psnr(img, gt, &rgb_cfg);
                sums[k + 1] += psnr(img, gt, &y_cfg);
                sums[k + 2] += ssim(img, gt, &y_cfg);
            }
            n += 1;
        }
        if n == 0 {
            eprintln!("warning: scale {s} skipped entirely (all LR inputs below 8 px)");
            continue;
        }
        let d = n as f64;
        rows.push(EvalRow {
            scale: s,
            images: n,
            psnr_rgb: sums[0] / d,
            psnr_y: sums[1] / d,
            ssim: sums[2] / d,
            bicubic_psnr_rgb: sums[3] / d,
            bicubic_psnr_y: sums[4] / d,
            bicubic_ssim: sums[5] / d,
        });
    }
    Ok(rows)
}
