use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Checkpoint, Params};
use crate::tensor::Tensor;

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adadelta,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adadelta => "adadelta",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adadelta" => Ok(OptimizerKind::Adadelta),
            _ => Err(Error::InvalidArgument(format!("unknown optimizer {s:?}"))),
        }
    }
}

/// `p ← p − lr·g`.
pub fn sgd_step(p: &mut [f64], g: &[f64], lr: f64) {
    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
}

/// One Adadelta update with running averages `sq` (of g²) and `acc` (of
/// Δ²); `lr` scales the applied step.
pub fn adadelta_step(p: &mut [f64], g: &[f64], sq: &mut [f64], acc: &mut [f64], lr: f64) {
    for i in 0..p.len() {
        sq[i] = ADADELTA_RHO * sq[i] + (1.0 - ADADELTA_RHO) * g[i] * g[i];
        let delta = (acc[i] + ADADELTA_EPS).sqrt() / (sq[i] + ADADELTA_EPS).sqrt() * g[i];
        acc[i] = ADADELTA_RHO * acc[i] + (1.0 - ADADELTA_RHO) * delta * delta;
        p[i] -= lr * delta;
    }
}

/// Optimizer over one [`Params`] set.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Per parameter: running averages of g² and Δ² (Adadelta only).
    state: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &Params) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adadelta => params
                .iter()
                .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
                .collect(),
        };
        Self { kind, state }
    }

    /// Applies averaged gradients. Non-finite gradients abort before any
    /// parameter changes.
    pub fn step(&mut self, params: &mut Params, grads: &[Vec<f64>], lr: f64, step: u64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                what: "gradient",
                step,
            });
        }
        for (i, ((_, t), g)) in params.iter_mut().zip(grads).enumerate() {
            if t.numel() != g.len() {
                return Err(Error::shape("optimizer", t.shape(), &[g.len()]));
            }
            match self.kind {
                OptimizerKind::Sgd => sgd_step(t.data_mut(), g, lr),
                OptimizerKind::Adadelta => {
                    let (sq, acc) = &mut self.state[i];
                    adadelta_step(t.data_mut(), g, sq, acc, lr);
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, params: &Params, prefix: &str, ckpt: &mut Checkpoint) {
        for ((name, _), (sq, acc)) in params.iter().zip(&self.state) {
            ckpt.insert(format!("{prefix}.{name}.sq"), Tensor::vector(sq.clone()));
            ckpt.insert(format!("{prefix}.{name}.acc"), Tensor::vector(acc.clone()));
        }
    }

    /// Restores state saved by [`Optimizer::save`]; absent state (e.g. from a
    /// stage with another optimizer) starts from zero.
    pub fn load(&mut self, params: &Params, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for ((name, t), (sq, acc)) in params.iter().zip(&mut self.state) {
            for (suffix, buf) in [("sq", sq), ("acc", acc)] {
                if let Some(saved) = ckpt.get(&format!("{prefix}.{name}.{suffix}")) {
                    if saved.numel() != t.numel() {
                        return Err(Error::format("checkpoint", format!("optimizer state for {name}")));
                    }
                    buf.copy_from_slice(saved.data());
                }
            }
        }
        Ok(())
    }
}
