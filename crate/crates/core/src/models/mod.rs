//! The BLSTM masking enhancer, the TDNN x-vector embedder, the normalization
//! pipeline around them, and checkpoint persistence.

mod checkpoint;
mod embedder;
mod enhancer;
mod pipeline;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

pub use checkpoint::{Checkpoint, Stage};
pub use embedder::{EmbedOutput, Embedder, EmbedderConfig, TapSet, N_TAPS};
pub use enhancer::{Enhancer, EnhancerConfig};
pub use pipeline::{Pipeline, PipelineOutput};

use crate::error::{Error, Result};
use crate::seed::{self, tag};
use crate::tensor::{Graph, Tensor, Var};

/// Named parameters in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter on `g`. Frozen parameters become constants:
    /// gradients still flow through them to upstream inputs.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.leaf(&t.clone().with_requires_grad(true))
                } else {
                    g.leaf(&t.clone().with_requires_grad(false))
                }
            })
            .collect();
        Bound {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars,
        }
    }

    /// Copies values from `src` by name; every name must exist with the same
    /// shape.
    pub fn load_from(&mut self, src: &HashMap<&str, &Tensor>) -> Result<()> {
        for (name, t) in &mut self.entries {
            let s = src.get(name.as_str()).ok_or_else(|| {
                Error::format("checkpoint", format!("missing parameter {name}"))
            })?;
            if s.shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name}: shape {:?}, expected {:?}", s.shape(), t.shape()),
                ));
            }
            t.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    /// Order-sensitive bitwise fingerprint of every value.
    pub fn checksum(&self) -> u64 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        let a = h.clone().finalize() as u64;
        h.update(&(self.numel() as u64).to_le_bytes());
        (a << 32) | h.finalize() as u64
    }
}

/// Parameters registered on one graph, in [`Params`] order.
#[derive(Debug)]
pub struct Bound<'g> {
    names: Vec<String>,
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Var<'g> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    /// Gradients in parameter order; zeros where none reached a parameter.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|v| match v.grad() {
                Some(t) => t.into_data(),
                None => vec![0.0; v.numel()],
            })
            .collect()
    }
}

pub(crate) fn xavier_uniform(fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect())
        .expect("shape matches length")
}

/// `rows × cols` with orthonormal rows (`rows ≤ cols`), via Gram-Schmidt on
/// Gaussian vectors.
pub(crate) fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    assert!(rows <= cols);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Tensor::new(vec![rows, cols], basis.concat()).expect("shape matches length")
}

pub(crate) fn init_rng(seed: u64, module: u64, index: usize) -> rand_chacha::ChaCha8Rng {
    seed::rng(seed, &[tag::INIT, module, index as u64])
}

/// `x · w + b` with `b` of shape `[1, n]` broadcast over the rows of `x`.
pub(crate) fn linear<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let rows = x.shape()[0];
    let ones = x.graph().ones(&[rows, 1]);
    x.matmul(&w)?.add(&ones.matmul(&b)?)
}
