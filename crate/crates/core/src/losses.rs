//! Training objectives on graph nodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TapSet;
use crate::tensor::{Axes, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the perceptual term in the combined loss.
    pub lambda: f64,
    /// Divide each perceptual term by the square root of its tap size.
    pub layer_normalized: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            layer_normalized: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda).map_err(|e| Error::validation("losses.lambda", e.to_string()))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")))
    }
}

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn new(total: f64) -> Self {
        Self {
            total,
            components: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, v: f64) -> Self {
        self.components.insert(name.to_string(), v);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }
}

/// One `‖a_i − b_i‖₂` term per tap layer.
pub fn perceptual_terms<'g>(a: &TapSet<'g>, b: &TapSet<'g>, layer_normalized: bool) -> Result<Vec<Var<'g>>> {
    a.iter()
        .zip(b.iter())
        .enumerate()
        .map(|(i, (x, y))| {
            if x.shape() != y.shape() {
                return Err(Error::TapMismatch {
                    layer: TapSet::layer_name(i),
                    lhs: x.shape(),
                    rhs: y.shape(),
                });
            }
            let norm = x.sub(&y)?.l2norm(&Axes::All)?;
            if layer_normalized {
                norm.scale(1.0 / (x.numel() as f64).sqrt())
            } else {
                Ok(norm)
            }
        })
        .collect()
}

fn sum_terms<'g>(terms: &[Var<'g>]) -> Result<Var<'g>> {
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    Ok(total)
}

/// Sum over the six taps of the distance between the noisy and clean
/// branch activations. Both branches receive gradients.
pub fn perceptual_modified<'g>(taps_noisy: &TapSet<'g>, taps_clean: &TapSet<'g>) -> Result<Var<'g>> {
    sum_terms(&perceptual_terms(taps_noisy, taps_clean, false)?)
}

/// Same distance with the clean reference detached, so only the enhanced
/// branch receives gradients.
pub fn perceptual_original<'g>(taps_enhanced: &TapSet<'g>, taps_reference: &TapSet<'g>) -> Result<Var<'g>> {
    let detached = TapSet::new(
        taps_reference
            .iter()
            .map(|v| v.detach())
            .collect::<Result<Vec<_>>>()?,
    )?;
    perceptual_modified(taps_enhanced, &detached)
}

/// `−log softmax(logits)[label]` for `[1, S]` or `[S]` logits.
pub fn cross_entropy<'g>(logits: Var<'g>, label: usize) -> Result<Var<'g>> {
    let n = logits.numel();
    if label >= n {
        return Err(Error::InvalidArgument(format!(
            "label {label} outside [0, {n})"
        )));
    }
    let flat = logits.reshape(&[1, n])?;
    let max = flat.data().into_iter().fold(f64::NEG_INFINITY, f64::max);
    let shifted = flat.affine(1.0, -max)?;
    let lse = shifted.exp()?.sum(&Axes::All)?.log()?;
    let picked = shifted.slice_cols(label, label + 1)?.sum(&Axes::All)?;
    lse.sub(&picked)
}

/// `λ·pcptl + (1−λ)·ce`.
pub fn combined<'g>(pcptl: Var<'g>, ce: Var<'g>, lambda: f64) -> Result<Var<'g>> {
    check_lambda(lambda)?;
    pcptl.scale(lambda)?.add(&ce.scale(1.0 - lambda)?)
}

/// `‖s − ŝ‖₂` over all elements.
pub fn euclidean_baseline<'g>(s_hat: Var<'g>, s: Var<'g>) -> Result<Var<'g>> {
    if s_hat.shape() != s.shape() {
        return Err(Error::shape("euclidean_baseline", &s_hat.shape(), &s.shape()));
    }
    s.sub(&s_hat)?.l2norm(&Axes::All)
}
