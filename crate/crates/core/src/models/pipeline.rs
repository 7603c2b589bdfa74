use super::{Bound, EmbedOutput, Embedder, Enhancer};
use crate::dsp::{self, ChannelStats, SigmaExponent, Spectrogram};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// The full inference chain:
/// log-Mel → channel norm (noisy stats) → mask → inverse channel norm
/// (clean stats) → instance norm → embedder.
///
/// Without an enhancer the chain reduces to instance norm → embedder.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub enhancer: Option<&'a Enhancer>,
    pub embedder: &'a Embedder,
    pub noisy_stats: &'a ChannelStats,
    pub clean_stats: &'a ChannelStats,
    pub sigma: SigmaExponent,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput<'g> {
    pub mask: Option<Var<'g>>,
    /// Embedder input after instance normalization.
    pub normalized: Var<'g>,
    pub embed: EmbedOutput<'g>,
}

impl<'a> Pipeline<'a> {
    pub fn baseline(embedder: &'a Embedder, stats: &'a ChannelStats, sigma: SigmaExponent) -> Self {
        Self {
            enhancer: None,
            embedder,
            noisy_stats: stats,
            clean_stats: stats,
            sigma,
        }
    }

    /// Graph forward. `enh` must be bound iff the pipeline has an enhancer.
    pub fn forward<'g>(&self, enh: Option<&Bound<'g>>, emb: &Bound<'g>, x: Var<'g>) -> Result<PipelineOutput<'g>> {
        let (mask, restored) = match (self.enhancer, enh) {
            (Some(e), Some(pe)) => {
                let x_norm = dsp::graph::channel_normalize(x, self.noisy_stats, self.sigma)?;
                let mask = e.forward(pe, x_norm)?;
                let masked = dsp::graph::apply_mask(x_norm, mask)?;
                let restored = dsp::graph::channel_inverse(masked, self.clean_stats, self.sigma)?;
                (Some(mask), restored)
            }
            (None, None) => (None, x),
            _ => {
                return Err(Error::InvalidArgument(
                    "enhancer parameters bound without an enhancer, or vice versa".into(),
                ))
            }
        };
        let normalized = dsp::graph::instance_normalize(restored, self.sigma)?;
        let embed = self.embedder.forward(emb, normalized)?;
        Ok(PipelineOutput {
            mask,
            normalized,
            embed,
        })
    }

    pub fn embed(&self, x: &Spectrogram) -> Result<Vec<f64>> {
        let g = Graph::new();
        let pe = self.enhancer.map(|e| e.params().bind(&g, false));
        let pm = self.embedder.params().bind(&g, false);
        let xv = g.leaf(&x.to_tensor());
        Ok(self.forward(pe.as_ref(), &pm, xv)?.embed.embedding.data())
    }
}
