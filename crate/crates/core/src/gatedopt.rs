//! AdamW with a per-item second-moment gate.
//!
//! Each training item carries a conviction depth `k`; while that item is being
//! trained the optimizer runs with `beta2 = max(0.999 * r^k, floor)` and then
//! returns to its default. Moments and the step counter are shared across all
//! items and are never reset when beta2 changes.
//!
//! Bias correction uses the beta2 in effect at the current step:
//!
//! ```text
//! m     = b1 * m + (1 - b1) * g
//! v     = b2 * v + (1 - b2) * g^2
//! m_hat = m / (1 - b1^t)
//! v_hat = v / (1 - b2^t)
//! theta = theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelhub::Trainable;
use crate::verifier::{TrainItem, TrainItemKind};

pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_BETA2_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSchedule {
    pub r: f64,
    pub beta2_floor: f64,
}

impl Default for GateSchedule {
    fn default() -> Self {
        Self {
            r: 0.98,
            beta2_floor: DEFAULT_BETA2_FLOOR,
        }
    }
}

impl GateSchedule {
    pub fn new(r: f64, beta2_floor: f64) -> Result<Self> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "r must be in (0, 1], got {r}"
            )));
        }
        if !(beta2_floor > 0.0 && beta2_floor < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "beta2_floor must be in (0, 1), got {beta2_floor}"
            )));
        }
        Ok(Self { r, beta2_floor })
    }

    /// Gate that never opens: every item trains at the default beta2.
    pub fn closed() -> Self {
        Self {
            r: 1.0,
            beta2_floor: DEFAULT_BETA2_FLOOR,
        }
    }

    pub fn beta2_for(&self, k: u32) -> f64 {
        if k == 0 {
            return DEFAULT_BETA2;
        }
        (DEFAULT_BETA2 * self.r.powi(k.min(i32::MAX as u32) as i32)).max(self.beta2_floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: DEFAULT_BETA2,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2_default: f64,
    /// beta2 used by the next step; restored to `beta2_default` after each item.
    pub active_beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lr must be positive, got {}",
                config.lr
            )));
        }
        if !(config.beta1 > 0.0 && config.beta1 < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "beta1 must be in (0, 1), got {}",
                config.beta1
            )));
        }
        if !(config.weight_decay >= 0.0) || !(config.eps > 0.0) {
            return Err(Error::InvalidParameter(
                "weight_decay must be non-negative and eps positive".into(),
            ));
        }
        Ok(Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: config.beta1,
            beta2_default: config.beta2,
            active_beta2: config.beta2,
            eps: config.eps,
            lr: config.lr,
            weight_decay: config.weight_decay,
        })
    }

    /// One AdamW step at `beta2`. Inputs are validated before anything is
    /// touched, so an error leaves both the state and `params` unchanged.
    pub fn apply_step(&mut self, params: &mut [f64], grads: &[f64], beta2: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(beta2 > 0.0 && beta2 < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "beta2 must be in (0, 1), got {beta2}"
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.beta1;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
        Ok(())
    }

    /// Step at the currently active beta2.
    pub fn step_active(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let beta2 = self.active_beta2;
        self.apply_step(params, grads, beta2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub steps_per_item: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub optimizer: AdamWConfig,
    pub schedule: GateSchedule,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            steps_per_item: 1,
            seed: 0,
            shuffle: true,
            optimizer: AdamWConfig::default(),
            schedule: GateSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTrace {
    pub item_id: String,
    pub kind: TrainItemKind,
    pub k: u32,
    pub beta2: f64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub epoch: usize,
    pub item: usize,
    pub beta2: f64,
    pub loss: f64,
    /// Mean absolute parameter change produced by this step.
    pub mean_abs_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub per_item: Vec<ItemTrace>,
    pub epochs: usize,
    pub final_losses: Vec<f64>,
    pub steps: Vec<StepTrace>,
}

impl TrainingReport {
    pub fn mean_final_loss(&self) -> Option<f64> {
        crate::textstat::mean(&self.final_losses)
    }
}

/// Trains `model` on `items` with per-item gated beta2.
///
/// Items are visited in a fresh seeded shuffle each epoch. `state` carries
/// over between calls so that a run can continue on a warmed-up optimizer.
pub fn train_corpus<M: Trainable + ?Sized>(
    model: &mut M,
    state: &mut OptimizerState,
    items: &[TrainItem],
    config: &TrainingConfig,
) -> Result<TrainingReport> {
    if items.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    if config.epochs == 0 || config.steps_per_item == 0 {
        return Err(Error::InvalidParameter(
            "epochs and steps_per_item must be positive".into(),
        ));
    }
    let encoded: Vec<Vec<u32>> = items
        .iter()
        .map(|it| model.encode_for_training(&it.text))
        .collect::<Result<_>>()?;

    let mut report = TrainingReport {
        per_item: items
            .iter()
            .map(|it| ItemTrace {
                item_id: it.id.clone(),
                kind: it.kind,
                k: it.conviction_k,
                beta2: config.schedule.beta2_for(it.conviction_k),
                losses: Vec::new(),
            })
            .collect(),
        epochs: config.epochs,
        final_losses: Vec::new(),
        steps: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut before = Vec::new();

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.sort_unstable();
            order.shuffle(&mut rng);
        }
        for &idx in &order {
            let beta2 = report.per_item[idx].beta2;
            state.active_beta2 = beta2;
            for _ in 0..config.steps_per_item {
                before.clear();
                before.extend_from_slice(model.parameters());
                let outcome = model.train_step(&encoded[idx], &mut |params, grads| {
                    state.step_active(params, grads)
                });
                let loss = match outcome {
                    Ok(loss) => loss,
                    Err(Error::NonFiniteLoss) => {
                        state.active_beta2 = state.beta2_default;
                        return Err(Error::Diverged {
                            step: report.steps.len(),
                            item_id: items[idx].id.clone(),
                            report: Box::new(report),
                        });
                    }
                    Err(e) => {
                        state.active_beta2 = state.beta2_default;
                        return Err(e);
                    }
                };
                let params = model.parameters();
                let delta = params
                    .iter()
                    .zip(&before)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / params.len().max(1) as f64;
                report.per_item[idx].losses.push(loss);
                report.steps.push(StepTrace {
                    step: state.step,
                    epoch,
                    item: idx,
                    beta2,
                    loss,
                    mean_abs_delta: delta,
                });
            }
            state.active_beta2 = state.beta2_default;
        }
    }
    report.final_losses = encoded
        .iter()
        .map(|ids| model.loss(ids))
        .collect::<Result<_>>()?;
    Ok(report)
}

/// Builds a fresh optimizer for `model` and trains it.
pub fn train_fresh<M: Trainable + ?Sized>(
    model: &mut M,
    items: &[TrainItem],
    config: &TrainingConfig,
) -> Result<(TrainingReport, OptimizerState)> {
    let mut state = OptimizerState::new(model.parameters().len(), config.optimizer)?;
    let report = train_corpus(model, &mut state, items, config)?;
    Ok((report, state))
}

pub fn raw_item(id: impl Into<String>, text: impl Into<String>) -> TrainItem {
    TrainItem {
        id: id.into(),
        kind: TrainItemKind::RawPassage,
        text: text.into(),
        conviction_k: 0,
        passage_ref: None,
        importance: 1.0,
    }
}
