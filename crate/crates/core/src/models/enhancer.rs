use serde::{Deserialize, Serialize};

use super::{init_rng, linear, orthogonal, xavier_uniform, Bound, Params};
use crate::dsp::{Mask, Spectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancerConfig {
    pub layers: usize,
    /// Per direction.
    pub hidden: usize,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 128,
        }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::validation(
                "enhancer",
                "layers and hidden must be positive",
            ));
        }
        Ok(())
    }
}

const MODULE_TAG: u64 = 1;
pub(crate) const DIRS: [&str; 2] = ["fwd", "bwd"];

/// Stacked BLSTM followed by a linear layer and a sigmoid, producing a
/// `[T, 30]` mask.
///
/// Layer `l ≥ 1` (and the output layer) reads the two directions of the
/// layer below as separate halves of its input weight, so swapping the
/// directions of a trained model is an exact operation.
#[derive(Debug, Clone, PartialEq)]
pub struct Enhancer {
    cfg: EnhancerConfig,
    params: Params,
}

fn name(layer: usize, dir: &str, what: &str) -> String {
    format!("enhancer.blstm{layer}.{dir}.{what}")
}

impl Enhancer {
    pub fn new(cfg: EnhancerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let mut params = Params::new();
        let mut idx = 0;
        let rng = |i: &mut usize| {
            *i += 1;
            init_rng(seed, MODULE_TAG, *i)
        };
        for l in 0..cfg.layers {
            let in_dim = if l == 0 { N_MELS } else { 2 * h };
            for dir in DIRS {
                params.push(
                    name(l, dir, "w_ih"),
                    xavier_uniform(in_dim, 4 * h, &[in_dim, 4 * h], &mut rng(&mut idx)),
                );
                params.push(name(l, dir, "w_hh"), orthogonal(h, 4 * h, &mut rng(&mut idx)));
                let mut b = vec![0.0; 4 * h];
                b[h..2 * h].fill(1.0);
                params.push(name(l, dir, "b"), Tensor::new(vec![1, 4 * h], b)?);
            }
        }
        params.push(
            "enhancer.out.w",
            xavier_uniform(2 * h, N_MELS, &[2 * h, N_MELS], &mut rng(&mut idx)),
        );
        params.push("enhancer.out.b", Tensor::zeros(&[1, N_MELS]));
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &EnhancerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// The same network with every layer's direction parameters exchanged.
    /// On a time-reversed input it yields the time-reversed output.
    pub fn swap_directions(&self) -> Self {
        let h = self.cfg.hidden;
        let mut out = self.clone();
        for l in 0..self.cfg.layers {
            for what in ["w_ih", "w_hh", "b"] {
                let f = self.params.get(&name(l, "fwd", what)).unwrap().clone();
                let b = self.params.get(&name(l, "bwd", what)).unwrap().clone();
                *out.params.get_mut(&name(l, "fwd", what)).unwrap() = b;
                *out.params.get_mut(&name(l, "bwd", what)).unwrap() = f;
            }
        }
        let mut swap_halves = |pname: &str| {
            let t = out.params.get_mut(pname).unwrap();
            let cols = t.shape()[1];
            let (top, bottom) = t.data_mut().split_at_mut(h * cols);
            top.swap_with_slice(bottom);
        };
        for l in 1..self.cfg.layers {
            for dir in DIRS {
                swap_halves(&name(l, dir, "w_ih"));
            }
        }
        swap_halves("enhancer.out.w");
        out
    }

    /// Mask for a channel-normalized `[T, 30]` input.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        match x.shape().as_slice() {
            &[t, k] if t > 0 && k == N_MELS => {}
            other => return Err(Error::shape("enhance", other, &[0, N_MELS])),
        }
        let mut halves = vec![x];
        for l in 0..self.cfg.layers {
            let fwd = self.direction(p, l, "fwd", &halves, false)?;
            let bwd = self.direction(p, l, "bwd", &halves, true)?;
            halves = vec![fwd, bwd];
        }
        let w = p.get("enhancer.out.w");
        let h = self.cfg.hidden;
        let proj = halves[0]
            .matmul(&w.slice_rows(0, h)?)?
            .add(&halves[1].matmul(&w.slice_rows(h, 2 * h)?)?)?;
        let rows = proj.shape()[0];
        let ones = x.graph().ones(&[rows, 1]);
        proj.add(&ones.matmul(&p.get("enhancer.out.b"))?)?.sigmoid()
    }

    fn direction<'g>(&self, p: &Bound<'g>, l: usize, dir: &str, inputs: &[Var<'g>], reverse: bool) -> Result<Var<'g>> {
        let h = self.cfg.hidden;
        let w_ih = p.get(&name(l, dir, "w_ih"));
        let w_hh = p.get(&name(l, dir, "w_hh"));
        let b = p.get(&name(l, dir, "b"));
        let pre = if inputs.len() == 1 {
            linear(inputs[0], w_ih, b)?
        } else {
            let proj = inputs[0]
                .matmul(&w_ih.slice_rows(0, h)?)?
                .add(&inputs[1].matmul(&w_ih.slice_rows(h, 2 * h)?)?)?;
            let ones = proj.graph().ones(&[proj.shape()[0], 1]);
            proj.add(&ones.matmul(&b)?)?
        };
        let t_len = pre.shape()[0];
        let g = pre.graph();
        let mut hs = g.constant(vec![1, h], vec![0.0; h])?;
        let mut cs = g.constant(vec![1, h], vec![0.0; h])?;
        let mut outs = vec![hs; t_len];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t_len).rev())
        } else {
            Box::new(0..t_len)
        };
        for t in order {
            let gates = pre.slice_rows(t, t + 1)?.add(&hs.matmul(&w_hh)?)?;
            let i = gates.slice_cols(0, h)?.sigmoid()?;
            let f = gates.slice_cols(h, 2 * h)?.sigmoid()?;
            let c_hat = gates.slice_cols(2 * h, 3 * h)?.tanh()?;
            let o = gates.slice_cols(3 * h, 4 * h)?.sigmoid()?;
            cs = f.mul(&cs)?.add(&i.mul(&c_hat)?)?;
            hs = o.mul(&cs.tanh()?)?;
            outs[t] = hs;
        }
        Var::concat_rows(&outs)
    }

    /// Inference on plain data: returns the mask and the masked input.
    pub fn enhance(&self, x_norm: &Spectrogram) -> Result<(Mask, Spectrogram)> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.leaf(&x_norm.to_tensor());
        let m = self.forward(&p, x)?;
        let mask = Mask::new(x_norm.n_frames(), m.data())?;
        let masked = crate::dsp::apply_mask(x_norm, &mask)?;
        Ok((mask, masked))
    }
}
