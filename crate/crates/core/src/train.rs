//! One-cycle training on streamed synthetic scenes with Adam or momentum SGD.

use alloc::vec;
use alloc::vec::Vec;

use crate::field::FieldBank;
use crate::geometry::{BevGrid, CameraView};
use crate::loss::{focal_loss, IouCounts, LossConfig};
use crate::math;
use crate::model::{class_mask, Model};
use crate::synth::{generate, ground_truth, render, BevMasks, GenParams, Image};
use crate::tensor::Tape;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Adam with decoupled weight decay; the scheduled momentum is used as β1.
    Adam { beta2: f64, eps: f64, weight_decay: f64 },
    /// Heavy-ball SGD: `v ← μ·v + g`, `p ← p − lr·v`.
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub steps: usize,
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub base_momentum: f64,
    pub max_momentum: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Evaluate and log every this many steps (and at the last step).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            steps: 2000,
            max_lr: 0.005,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            base_momentum: 0.85,
            max_momentum: 0.95,
            clip_norm: 5.0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.steps > 0
            && self.max_lr > 0.0
            && self.pct_start > 0.0
            && self.pct_start < 1.0
            && self.div_factor >= 1.0
            && self.final_div_factor >= 1.0
            && (0.0..1.0).contains(&self.base_momentum)
            && (0.0..1.0).contains(&self.max_momentum)
            && self.clip_norm >= 0.0
            && self.eval_every > 0
            && match self.optimizer {
                Optimizer::Adam { beta2, eps, weight_decay } => {
                    (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0
                }
                Optimizer::Sgd => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(alloc::format!("invalid training parameters {self:?}")))
        }
    }

    /// Learning rate and momentum at `step` (cosine one-cycle).
    pub fn schedule(&self, step: usize) -> (f64, f64) {
        let initial = self.max_lr / self.div_factor;
        let last = initial / self.final_div_factor;
        let total = self.steps.saturating_sub(1).max(1) as f64;
        let up = (self.pct_start * total).max(1.0);
        let s = step as f64;
        let cos_anneal = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + math::cos(core::f64::consts::PI * frac));
        if s <= up {
            let f = s / up;
            (cos_anneal(initial, self.max_lr, f), cos_anneal(self.max_momentum, self.base_momentum, f))
        } else {
            let f = ((s - up) / (total - up).max(1.0)).min(1.0);
            (cos_anneal(self.max_lr, last, f), cos_anneal(self.base_momentum, self.max_momentum, f))
        }
    }
}

/// Rendered views with BEV targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub images: Vec<Image>,
    pub masks: BevMasks,
}

impl Sample {
    pub fn render(scene: &crate::synth::SyntheticScene, views: &[CameraView], grid: &BevGrid) -> Self {
        Self { images: views.iter().map(|v| render(scene, v)).collect(), masks: ground_truth(scene, grid) }
    }
}

/// Deterministic scene source: sample `k` comes from seed `base_seed + k`,
/// or always from `base_seed` when `fixed`.
#[derive(Debug, Clone)]
pub struct SceneStream {
    pub params: GenParams,
    pub rig: Vec<CameraView>,
    pub grid: BevGrid,
    pub base_seed: u64,
    pub fixed: bool,
}

impl SceneStream {
    pub fn sample(&self, k: usize) -> Result<Sample> {
        let seed = if self.fixed { self.base_seed } else { self.base_seed.wrapping_add(k as u64) };
        let scene = generate(seed, &self.params, &self.rig)?;
        Ok(Sample::render(&scene, &self.rig, &self.grid))
    }

    pub fn samples(&self, n: usize) -> Result<Vec<Sample>> {
        (0..n).map(|k| self.sample(k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub iou_vehicle: f64,
    pub iou_drivable: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Evaluation {
    pub vehicle: IouCounts,
    pub drivable: IouCounts,
}

/// Per-sample predictions: vehicle and drivable masks.
pub fn predict_masks(model: &Model, bank: &FieldBank, images: &[Image]) -> Result<(Vec<bool>, Vec<bool>)> {
    let logits = model.predict(images, bank)?;
    let c = model.config().classes();
    Ok((class_mask(&logits, c, 0), class_mask(&logits, c, 1)))
}

/// IoU accumulated over all samples (summed intersections over summed unions).
pub fn evaluate(model: &Model, bank: &FieldBank, samples: &[Sample]) -> Result<Evaluation> {
    let mut e = Evaluation::default();
    for s in samples {
        let (veh, drv) = predict_masks(model, bank, &s.images)?;
        e.vehicle.add(IouCounts::of(&veh, &s.masks.vehicle));
        e.drivable.add(IouCounts::of(&drv, &s.masks.drivable));
    }
    Ok(e)
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { step },
        other => other,
    }
}

/// Trains `model` on `source(step)` samples seen through `rig`, evaluating
/// on `eval` every `cfg.eval_every` steps and after the last step.
pub fn train<F>(
    model: &mut Model,
    rig: &[CameraView],
    mut source: F,
    eval: &[Sample],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<Vec<MetricRow>>
where
    F: FnMut(usize) -> Result<Sample>,
{
    cfg.validate()?;
    let mut bank = model.field_bank(rig)?;
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut second = velocity.clone();
    // Adam bias corrections with a scheduled β1: running product of (β1_t).
    let (mut beta1_prod, mut beta2_prod) = (1.0, 1.0);
    let mut rows = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 0..cfg.steps {
        let sample = source(step)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &sample.images, &bank).map_err(diverged(step))?;
        let loss = focal_loss(&mut tape, fwd.logits, &sample.masks.targets(), loss_cfg).map_err(diverged(step))?;
        let loss_value = tape.scalar_value(loss);
        tape.backward(loss).map_err(diverged(step))?;

        let grads: Vec<&[f64]> = fwd.params.iter().map(|v| tape.grad(*v).expect("parameters require grad")).collect();
        let norm = math::sqrt(grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>());
        if !norm.is_finite() {
            return Err(Error::Diverged { step });
        }
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        let (lr, momentum) = cfg.schedule(step);
        let params = model.params_mut().tensors_mut().zip(&grads).zip(velocity.iter_mut().zip(second.iter_mut()));
        match cfg.optimizer {
            Optimizer::Sgd => {
                for ((t, g), (vel, _)) in params {
                    for ((p, gi), vi) in t.data_mut().iter_mut().zip(g.iter()).zip(vel.iter_mut()) {
                        *vi = momentum * *vi + clip * gi;
                        *p -= lr * *vi;
                    }
                }
            }
            Optimizer::Adam { beta2, eps, weight_decay } => {
                beta1_prod *= momentum;
                beta2_prod *= beta2;
                let (c1, c2) = (1.0 - beta1_prod, 1.0 - beta2_prod);
                for ((t, g), (m, v)) in params {
                    for (((p, gi), mi), vi) in t.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = clip * gi;
                        *mi = momentum * *mi + (1.0 - momentum) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *p -= lr * (weight_decay * *p + (*mi / c1) / (math::sqrt(*vi / c2) + eps));
                    }
                }
            }
        }
        if model.params().iter().any(|(_, t)| t.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged { step });
        }
        if model.params().get("field.log_lambda").is_some() {
            bank.recompute(model.lambda());
        }
        loss_sum += loss_value;
        loss_n += 1;

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let e = evaluate(model, &bank, eval)?;
            rows.push(MetricRow {
                step: done,
                loss: loss_sum / loss_n as f64,
                iou_vehicle: e.vehicle.iou(),
                iou_drivable: e.drivable.iou(),
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::toy_rig;

    #[test]
    fn one_cycle_shape() {
        let cfg = TrainConfig { steps: 101, max_lr: 0.05, ..TrainConfig::default() };
        let (lr0, m0) = cfg.schedule(0);
        assert!((lr0 - 0.05 / 25.0).abs() < 1e-15);
        assert!((m0 - 0.95).abs() < 1e-15);
        let (lr_peak, m_peak) = cfg.schedule(30);
        assert!((lr_peak - 0.05).abs() < 1e-15);
        assert!((m_peak - 0.85).abs() < 1e-15);
        let (lr_end, m_end) = cfg.schedule(100);
        assert!((lr_end - 0.05 / 25.0 / 1e4).abs() < 1e-15);
        assert!((m_end - 0.95).abs() < 1e-15);
        for s in 0..30 {
            assert!(cfg.schedule(s + 1).0 >= cfg.schedule(s).0);
        }
        for s in 30..100 {
            assert!(cfg.schedule(s + 1).0 <= cfg.schedule(s).0);
        }
    }

    fn tiny() -> (Model, SceneStream) {
        let cfg = ModelConfig { d_model: 16, ff_hidden: 16, decoder_hidden: 8, ..ModelConfig::default() };
        let grid = cfg.grid;
        let stream = SceneStream { params: GenParams::for_grid(&grid), rig: toy_rig(), grid, base_seed: 100, fixed: false };
        (Model::new(cfg).unwrap(), stream)
    }

    #[test]
    fn training_is_deterministic_and_lowers_the_loss() {
        let tc = TrainConfig { steps: 40, eval_every: 20, ..TrainConfig::default() };
        let sgd = TrainConfig { optimizer: Optimizer::Sgd, max_lr: 0.05, ..tc.clone() };
        let run = |tc: &TrainConfig| {
            let (mut model, stream) = tiny();
            let eval = stream.samples(2).unwrap();
            let rows = train(&mut model, &stream.rig.clone(), |k| stream.sample(k), &eval, &LossConfig::default(), tc).unwrap();
            (rows, model)
        };
        for cfg in [&tc, &sgd] {
            let (a, ma) = run(cfg);
            let (b, mb) = run(cfg);
            assert_eq!(a, b);
            assert_eq!(ma, mb);
            assert_eq!(a.len(), 2);
            assert_eq!(a[1].step, 40);
            assert!(a[1].loss < a[0].loss, "{a:?}");
        }
    }

    #[test]
    fn non_finite_parameters_report_divergence() {
        let (mut model, stream) = tiny();
        model.params_mut().tensors_mut().next().unwrap().data_mut()[0] = f64::NAN;
        let tc = TrainConfig { steps: 5, ..TrainConfig::default() };
        let err = train(&mut model, &stream.rig.clone(), |k| stream.sample(k), &[], &LossConfig::default(), &tc);
        assert!(matches!(err, Err(Error::Diverged { step: 0 })), "{err:?}");
    }
}
