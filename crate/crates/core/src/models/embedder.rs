use serde::{Deserialize, Serialize};

use super::{init_rng, linear, xavier_uniform, Bound, Params};
use crate::dsp::{Spectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::tensor::{Axes, Graph, Tensor, Var};

/// Five TDNN layers plus `fc1`.
pub const N_TAPS: usize = 6;
const N_TDNN: usize = N_TAPS - 1;
const MODULE_TAG: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    /// Frame offsets read by each TDNN layer.
    pub contexts: Vec<Vec<i64>>,
    /// Output width of each TDNN layer.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub fc2_dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            contexts: vec![
                vec![-2, -1, 0, 1, 2],
                vec![-2, 0, 2],
                vec![-3, 0, 3],
                vec![0],
                vec![0],
            ],
            channels: vec![64; N_TDNN],
            embedding_dim: 128,
            fc2_dim: 128,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.contexts.len() != N_TDNN {
            bad.push(format!("contexts: need {N_TDNN} layers, got {}", self.contexts.len()));
        }
        if self.channels.len() != N_TDNN || self.channels.contains(&0) {
            bad.push(format!("channels: need {N_TDNN} positive widths"));
        }
        for (i, c) in self.contexts.iter().enumerate() {
            if c.is_empty() || c.windows(2).any(|w| w[0] >= w[1]) {
                bad.push(format!("contexts[{i}]: offsets must be nonempty and strictly increasing"));
            }
        }
        if self.embedding_dim == 0 || self.fc2_dim == 0 {
            bad.push("embedding_dim and fc2_dim must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::validation("embedder", bad.join("; ")))
        }
    }

    /// Frames consumed by the TDNN stack to produce one output frame.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .contexts
            .iter()
            .map(|c| (c[c.len() - 1] - c[0]) as usize)
            .sum::<usize>()
    }
}

/// The six perceptual tap activations, in layer order.
#[derive(Debug, Clone)]
pub struct TapSet<'g> {
    taps: Vec<Var<'g>>,
}

impl<'g> TapSet<'g> {
    pub fn new(taps: Vec<Var<'g>>) -> Result<Self> {
        if taps.len() != N_TAPS {
            return Err(Error::InvalidArgument(format!(
                "a tap set holds {N_TAPS} activations, got {}",
                taps.len()
            )));
        }
        Ok(Self { taps })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn get(&self, i: usize) -> Var<'g> {
        self.taps[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = Var<'g>> + '_ {
        self.taps.iter().copied()
    }

    pub fn layer_name(i: usize) -> String {
        if i < N_TDNN {
            format!("tdnn{}", i + 1)
        } else {
            "fc1".into()
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbedOutput<'g> {
    /// Mean of the last TDNN layer over time, `[1, C]`.
    pub pooled: Var<'g>,
    /// `fc1` output before its nonlinearity, `[1, E]`.
    pub embedding: Var<'g>,
    /// `[1, S]`.
    pub logits: Var<'g>,
    pub taps: TapSet<'g>,
}

/// x-vector style embedder: TDNN stack, global average pooling, two fully
/// connected layers and a speaker classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    cfg: EmbedderConfig,
    n_speakers: usize,
    params: Params,
}

impl Embedder {
    pub fn new(cfg: EmbedderConfig, n_speakers: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_speakers < 2 {
            return Err(Error::validation("embedder", "need at least 2 speakers"));
        }
        let mut params = Params::new();
        let mut idx = 0;
        let mut layer = |params: &mut Params, pname: &str, fan_in: usize, fan_out: usize| {
            idx += 1;
            let mut rng = init_rng(seed, MODULE_TAG, idx);
            params.push(
                format!("embedder.{pname}.w"),
                xavier_uniform(fan_in, fan_out, &[fan_in, fan_out], &mut rng),
            );
            params.push(format!("embedder.{pname}.b"), Tensor::zeros(&[1, fan_out]));
        };
        let mut width = N_MELS;
        for (i, (ctx, &out)) in cfg.contexts.iter().zip(&cfg.channels).enumerate() {
            layer(&mut params, &format!("tdnn{}", i + 1), ctx.len() * width, out);
            width = out;
        }
        layer(&mut params, "fc1", width, cfg.embedding_dim);
        layer(&mut params, "fc2", cfg.embedding_dim, cfg.fc2_dim);
        layer(&mut params, "classifier", cfg.fc2_dim, n_speakers);
        Ok(Self {
            cfg,
            n_speakers,
            params,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn n_speakers(&self) -> usize {
        self.n_speakers
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Forward pass on an instance-normalized `[T, 30]` input.
    pub fn forward<'g>(&self, p: &Bound<'g>, s: Var<'g>) -> Result<EmbedOutput<'g>> {
        let t = match s.shape().as_slice() {
            &[t, k] if k == N_MELS => t,
            other => return Err(Error::shape("embed", other, &[0, N_MELS])),
        };
        let required = self.cfg.receptive_field();
        if t < required {
            return Err(Error::TooShort {
                required,
                got: t,
                unit: "frames",
            });
        }
        let mut h = s;
        let mut taps = Vec::with_capacity(N_TAPS);
        for (i, ctx) in self.cfg.contexts.iter().enumerate() {
            let rows = h.shape()[0];
            let lo = ctx[0];
            let out_rows = rows - (ctx[ctx.len() - 1] - lo) as usize;
            let spliced = ctx
                .iter()
                .map(|&c| {
                    let start = (c - lo) as usize;
                    h.slice_rows(start, start + out_rows)
                })
                .collect::<Result<Vec<_>>>()?;
            let spliced = if spliced.len() == 1 {
                spliced[0]
            } else {
                Var::concat_cols(&spliced)?
            };
            let name = format!("embedder.tdnn{}", i + 1);
            h = linear(spliced, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")))?.relu()?;
            taps.push(h);
        }
        let width = h.shape()[1];
        let pooled = h.mean(&Axes::along(0))?.reshape(&[1, width])?;
        let embedding = linear(pooled, p.get("embedder.fc1.w"), p.get("embedder.fc1.b"))?;
        let act = embedding.relu()?;
        taps.push(act);
        let hidden = linear(act, p.get("embedder.fc2.w"), p.get("embedder.fc2.b"))?.relu()?;
        let logits = linear(
            hidden,
            p.get("embedder.classifier.w"),
            p.get("embedder.classifier.b"),
        )?;
        Ok(EmbedOutput {
            pooled,
            embedding,
            logits,
            taps: TapSet::new(taps)?,
        })
    }

    /// Embedding of an instance-normalized spectrogram.
    pub fn embed(&self, s: &Spectrogram) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = g.leaf(&s.to_tensor());
        Ok(self.forward(&p, x)?.embedding.data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Embedder {
        let cfg = EmbedderConfig {
            channels: vec![8, 8, 8, 8, 12],
            embedding_dim: 6,
            fc2_dim: 5,
            ..EmbedderConfig::default()
        };
        Embedder::new(cfg, 4, 11).unwrap()
    }

    #[test]
    fn default_receptive_field() {
        assert_eq!(EmbedderConfig::default().receptive_field(), 15);
    }

    #[test]
    fn shapes_and_taps() {
        let e = small();
        let g = Graph::new();
        let p = e.params().bind(&g, false);
        let x = g.constant(vec![20, N_MELS], (0..600).map(|i| (i as f64).sin()).collect()).unwrap();
        let out = e.forward(&p, x).unwrap();
        assert_eq!(out.taps.len(), N_TAPS);
        assert_eq!(out.taps.get(0).shape(), vec![16, 8]);
        assert_eq!(out.taps.get(2).shape(), vec![6, 8]);
        assert_eq!(out.taps.get(4).shape(), vec![6, 12]);
        assert_eq!(out.taps.get(5).shape(), vec![1, 6]);
        assert_eq!(out.embedding.shape(), vec![1, 6]);
        assert_eq!(out.logits.shape(), vec![1, 4]);
        let last = out.taps.get(4).value();
        for c in 0..12 {
            let mean = (0..6).map(|r| last.at(r, c)).sum::<f64>() / 6.0;
            assert!((mean - out.pooled.value().at(0, c)).abs() < 1e-15);
        }
    }

    #[test]
    fn short_input_names_minimum() {
        let e = small();
        let g = Graph::new();
        let p = e.params().bind(&g, false);
        let x = g.constant(vec![14, N_MELS], vec![0.0; 14 * N_MELS]).unwrap();
        match e.forward(&p, x) {
            Err(Error::TooShort { required: 15, got: 14, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn repeated_constant_input_keeps_pooled_mean() {
        let e = small();
        let pooled = |t: usize| {
            let g = Graph::new();
            let p = e.params().bind(&g, false);
            let row: Vec<f64> = (0..N_MELS).map(|k| (k as f64 * 0.3).cos()).collect();
            let x = g.constant(vec![t, N_MELS], row.repeat(t)).unwrap();
            e.forward(&p, x).unwrap().pooled.data()
        };
        let a = pooled(20);
        let b = pooled(40);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_config() {
        let cfg = EmbedderConfig {
            contexts: vec![vec![0, 0]; 5],
            ..EmbedderConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(Embedder::new(EmbedderConfig::default(), 1, 0).is_err());
    }
}
