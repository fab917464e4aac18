use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr(t) = lr_min + ½(lr0 − lr_min)(1 + cos(π·t/total_steps))`,
    /// held at `lr_min` past the end.
    Cosine { lr0: f64, lr_min: f64, total_steps: u64 },
}

impl LrSchedule {
    pub fn lr(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                lr0,
                lr_min,
                total_steps,
            } => {
                if total_steps == 0 || t >= total_steps {
                    return lr_min;
                }
                if t == 0 {
                    return lr0;
                }
                let frac = t as f64 / total_steps as f64;
                lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Applies one update per call to every non-frozen parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule) -> Self {
        Self {
            kind,
            schedule,
            step: 0,
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Update parameters from their gradients and return the learning rate
    /// that was used. Gradients are cleared afterwards.
    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>) -> Result<f64> {
        if store.iter().any(|(_, p)| !p.frozen && p.grad.is_none()) {
            return Err(Error::Usage(
                "optimizer step without gradients; run backward first".into(),
            ));
        }
        let lr = self.schedule.lr(self.step);
        let lr_f = F::of(lr);
        for p in store.iter_mut() {
            if p.frozen {
                p.grad = None;
                continue;
            }
            let g = p.grad.take().expect("checked above");
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let mu = F::of(momentum);
                    let v = p
                        .slots
                        .momentum
                        .get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                    for ((w, vi), &gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vi = mu * *vi + gi;
                        *w -= lr_f * *vi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    p.slots.steps += 1;
                    let t = p.slots.steps as i32;
                    let bc1 = F::of(1.0 - beta1.powi(t));
                    let bc2 = F::of(1.0 - beta2.powi(t));
                    let (b1, b2, eps) = (F::of(beta1), F::of(beta2), F::of(eps));
                    let m = p
                        .slots
                        .adam_m
                        .get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                    let v = p
                        .slots
                        .adam_v
                        .get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
                    let one = F::one();
                    for (((w, mi), vi), &gi) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mi = b1 * *mi + (one - b1) * gi;
                        *vi = b2 * *vi + (one - b2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr_f * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
