//! Log-Mel front-end, corpus/utterance normalizations and masking.
//!
//! Everything here works on plain buffers. The [`graph`] submodule holds the
//! differentiable counterparts used inside training graphs; both paths are
//! checked against each other in tests.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 30;
pub const F_MAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-10;
/// Added to every deviation that appears in a denominator.
pub const NORM_EPS: f64 = 1e-8;

const SPEC_MAGIC: &[u8; 8] = b"NVLSPEC1";

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "waveform sample {i} is not finite"
            )));
        }
        Ok(Self { samples })
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Mean square.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

/// Number of analysis frames for a signal of `len` samples (no padding).
pub fn frame_count(len: usize) -> usize {
    if len < WIN_LENGTH {
        0
    } else {
        1 + (len - WIN_LENGTH) / HOP_LENGTH
    }
}

/// T×30 log-Mel features, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    n_frames: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub fn new(n_frames: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_frames * N_MELS {
            return Err(Error::shape("spectrogram", &[n_frames, N_MELS], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "spectrogram contains non-finite values".into(),
            ));
        }
        Ok(Self { n_frames, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [rows, N_MELS] => Self::new(*rows, t.data().to_vec()),
            other => Err(Error::shape("spectrogram", &[0, N_MELS], other)),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_frames, N_MELS], self.data.clone()).expect("shape checked")
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        N_MELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * N_MELS + k]
    }

    /// Frames `start..start+len`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.n_frames {
            return Err(Error::TooShort {
                required: start + len,
                got: self.n_frames,
                unit: "frames",
            });
        }
        Self::new(
            len,
            self.data[start * N_MELS..(start + len) * N_MELS].to_vec(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 8);
        out.extend_from_slice(SPEC_MAGIC);
        out.extend_from_slice(&(self.n_frames as u32).to_le_bytes());
        out.extend_from_slice(&(N_MELS as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "spectrogram";
        if bytes.len() < 16 {
            return Err(Error::format(WHAT, "header truncated"));
        }
        if &bytes[..8] != SPEC_MAGIC {
            return Err(Error::format(WHAT, "bad magic"));
        }
        let t = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let k = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        if k != N_MELS {
            return Err(Error::format(WHAT, format!("expected {N_MELS} bins, got {k}")));
        }
        let expected = t
            .checked_mul(k)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(16))
            .ok_or_else(|| Error::format(WHAT, "frame count overflows"))?;
        if bytes.len() != expected {
            return Err(Error::format(
                WHAT,
                format!("expected {expected} bytes, got {}", bytes.len()),
            ));
        }
        let data = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(t, data).map_err(|e| Error::format(WHAT, e.to_string()))
    }

    /// Per-bin mean over frames.
    pub fn bin_means(&self) -> Vec<f64> {
        let mut mu = vec![0.0; N_MELS];
        for frame in self.data.chunks_exact(N_MELS) {
            mu.iter_mut().zip(frame).for_each(|(m, v)| *m += v);
        }
        mu.iter_mut().for_each(|m| *m /= self.n_frames.max(1) as f64);
        mu
    }

    /// Per-bin population standard deviation over frames.
    pub fn bin_stds(&self) -> Vec<f64> {
        let mu = self.bin_means();
        let mut var = vec![0.0; N_MELS];
        for frame in self.data.chunks_exact(N_MELS) {
            for k in 0..N_MELS {
                let d = frame[k] - mu[k];
                var[k] += d * d;
            }
        }
        var.iter()
            .map(|v| (v / self.n_frames.max(1) as f64).sqrt())
            .collect()
    }
}

/// Exponent applied to deviations in the normalization denominators.
///
/// `One` divides by the standard deviation. `Two` divides by the variance,
/// matching the formulas as originally written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaExponent {
    #[default]
    One,
    Two,
}

impl SigmaExponent {
    pub fn from_power(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            other => Err(Error::validation(
                "features.sigma_exponent",
                format!("must be 1 or 2, got {other}"),
            )),
        }
    }

    pub fn power(self) -> u32 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }

    /// σ^p + ε
    pub fn denominator(self, sigma: f64) -> f64 {
        match self {
            Self::One => sigma + NORM_EPS,
            Self::Two => sigma * sigma + NORM_EPS,
        }
    }
}

/// Per-bin corpus statistics used by channel normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != N_MELS || sigma.len() != N_MELS {
            return Err(Error::shape("channel_stats", &[mu.len()], &[sigma.len()]));
        }
        if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || mu.iter().any(|m| !m.is_finite())
        {
            return Err(Error::InvalidArgument(
                "channel stats need finite means and positive deviations".into(),
            ));
        }
        Ok(Self { mu, sigma })
    }

    pub fn identity() -> Self {
        Self {
            mu: vec![0.0; N_MELS],
            sigma: vec![1.0; N_MELS],
        }
    }
}

/// Per-cell gains in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    n_frames: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(n_frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_frames * N_MELS {
            return Err(Error::shape("mask", &[n_frames, N_MELS], &[values.len()]));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { n_frames, values })
    }

    pub fn filled(n_frames: usize, value: f64) -> Result<Self> {
        Self::new(n_frames, vec![value; n_frames * N_MELS])
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular Mel filters over the one-sided FFT bins, peaks normalized to 1.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new() -> Self {
        let n_bins = N_FFT / 2 + 1;
        let mel_max = hz_to_mel(F_MAX);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
        let weights = (0..N_MELS)
            .map(|m| {
                let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = bin_hz(k);
                        if f > lo && f <= center {
                            (f - lo) / (center - lo)
                        } else if f > center && f < hi {
                            (hi - f) / (hi - center)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers_hz: edges[1..=N_MELS].to_vec(),
        }
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Index of the filter whose center is closest to `hz`.
    pub fn nearest_bin(&self, hz: f64) -> usize {
        self.centers_hz
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - hz).abs().total_cmp(&(b.1 - hz).abs()))
            .map(|(i, _)| i)
            .expect("filterbank is non-empty")
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

struct Frontend {
    window: Vec<f64>,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

fn frontend() -> &'static Frontend {
    static FRONTEND: OnceLock<Frontend> = OnceLock::new();
    FRONTEND.get_or_init(|| Frontend {
        // periodic Hann
        window: (0..WIN_LENGTH)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / WIN_LENGTH as f64).cos())
            .collect(),
        filterbank: MelFilterbank::new(),
        fft: FftPlanner::new().plan_fft_forward(N_FFT),
    })
}

pub fn mel_filterbank() -> &'static MelFilterbank {
    &frontend().filterbank
}

/// 30-bin log-Mel magnitude spectrogram with a 400/160 Hann analysis.
pub fn logmel(w: &Waveform) -> Result<Spectrogram> {
    if w.len() < WIN_LENGTH {
        return Err(Error::TooShort {
            required: WIN_LENGTH,
            got: w.len(),
            unit: "samples",
        });
    }
    let fe = frontend();
    let n_frames = frame_count(w.len());
    let n_bins = N_FFT / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); fe.fft.get_inplace_scratch_len()];
    let mut mags = vec![0.0; n_bins];
    let mut data = Vec::with_capacity(n_frames * N_MELS);
    for t in 0..n_frames {
        let frame = &w.samples()[t * HOP_LENGTH..t * HOP_LENGTH + WIN_LENGTH];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < WIN_LENGTH {
                Complex::new(frame[i] * fe.window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fe.fft.process_with_scratch(&mut buf, &mut scratch);
        for (m, c) in mags.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for filter in fe.filterbank.weights() {
            let e: f64 = filter.iter().zip(&mags).map(|(w, m)| w * m).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }
    Spectrogram::new(n_frames, data)
}

/// X(k) ← (X(k) − μ(k)) / (σ(k)^p + ε)
pub fn channel_normalize(s: &Spectrogram, stats: &ChannelStats, p: SigmaExponent) -> Spectrogram {
    let denom: Vec<f64> = stats.sigma.iter().map(|&sd| p.denominator(sd)).collect();
    let data = s
        .data
        .chunks_exact(N_MELS)
        .flat_map(|frame| {
            (0..N_MELS).map(|k| (frame[k] - stats.mu[k]) / denom[k]).collect::<Vec<_>>()
        })
        .collect();
    Spectrogram {
        n_frames: s.n_frames,
        data,
    }
}

/// Ŝ(k) ← Ŝ(k)·(σ(k)^p + ε) + μ(k)
pub fn channel_inverse(s: &Spectrogram, stats: &ChannelStats, p: SigmaExponent) -> Spectrogram {
    let scale: Vec<f64> = stats.sigma.iter().map(|&sd| p.denominator(sd)).collect();
    let data = s
        .data
        .chunks_exact(N_MELS)
        .flat_map(|frame| {
            (0..N_MELS).map(|k| frame[k] * scale[k] + stats.mu[k]).collect::<Vec<_>>()
        })
        .collect();
    Spectrogram {
        n_frames: s.n_frames,
        data,
    }
}

/// Per-utterance, per-bin standardization.
pub fn instance_normalize(s: &Spectrogram, p: SigmaExponent) -> Result<Spectrogram> {
    if s.n_frames < 2 {
        return Err(Error::TooShort {
            required: 2,
            got: s.n_frames,
            unit: "frames",
        });
    }
    let mu = s.bin_means();
    let denom: Vec<f64> = s.bin_stds().into_iter().map(|sd| p.denominator(sd)).collect();
    let data = s
        .data
        .chunks_exact(N_MELS)
        .flat_map(|frame| (0..N_MELS).map(|k| (frame[k] - mu[k]) / denom[k]).collect::<Vec<_>>())
        .collect();
    Ok(Spectrogram {
        n_frames: s.n_frames,
        data,
    })
}

/// Mean and variance normalization for the embedder input. Same operation as
/// [`instance_normalize`].
pub fn mvn(s: &Spectrogram, p: SigmaExponent) -> Result<Spectrogram> {
    instance_normalize(s, p)
}

/// Ŝ = X ⊗ M
pub fn apply_mask(x: &Spectrogram, m: &Mask) -> Result<Spectrogram> {
    if x.n_frames != m.n_frames {
        return Err(Error::shape(
            "apply_mask",
            &[x.n_frames, N_MELS],
            &[m.n_frames, N_MELS],
        ));
    }
    let data = x.data.iter().zip(&m.values).map(|(a, b)| a * b).collect();
    Ok(Spectrogram {
        n_frames: x.n_frames,
        data,
    })
}

/// Pooled per-bin mean and population deviation over every frame of every
/// utterance. Deviations are floored at [`NORM_EPS`].
pub fn compute_channel_stats<'a, I>(corpus: I) -> Result<ChannelStats>
where
    I: IntoIterator<Item = &'a Spectrogram>,
    I::IntoIter: Clone,
{
    let iter = corpus.into_iter();
    let mut frames = 0usize;
    let mut sum = vec![0.0; N_MELS];
    for s in iter.clone() {
        frames += s.n_frames;
        for frame in s.data.chunks_exact(N_MELS) {
            sum.iter_mut().zip(frame).for_each(|(a, v)| *a += v);
        }
    }
    if frames == 0 {
        return Err(Error::InvalidArgument("channel stats over an empty corpus".into()));
    }
    if frames < 2 {
        return Err(Error::TooShort {
            required: 2,
            got: frames,
            unit: "frames",
        });
    }
    let mu: Vec<f64> = sum.iter().map(|s| s / frames as f64).collect();
    let mut sq = vec![0.0; N_MELS];
    for s in iter {
        for frame in s.data.chunks_exact(N_MELS) {
            for k in 0..N_MELS {
                let d = frame[k] - mu[k];
                sq[k] += d * d;
            }
        }
    }
    let sigma = sq
        .iter()
        .map(|v| (v / frames as f64).sqrt().max(NORM_EPS))
        .collect();
    ChannelStats::new(mu, sigma)
}

/// Differentiable normalizations over `[T, 30]` graph nodes.
pub mod graph {
    use super::{ChannelStats, SigmaExponent, N_MELS, NORM_EPS};
    use crate::error::{Error, Result};
    use crate::tensor::{Axes, Var};

    fn rows_and_bins(x: &Var<'_>, op: &'static str) -> Result<usize> {
        match x.shape().as_slice() {
            &[t, k] if k == N_MELS => Ok(t),
            other => Err(Error::shape(op, other, &[0, N_MELS])),
        }
    }

    /// Repeats a length-30 row `t` times via `ones[t×1] · row[1×30]`.
    fn tile_rows<'g>(row: Var<'g>, t: usize) -> Result<Var<'g>> {
        let ones = row.graph().ones(&[t, 1]);
        ones.matmul(&row.reshape(&[1, N_MELS])?)
    }

    fn tile_constant<'g>(x: &Var<'g>, values: &[f64], t: usize) -> Result<Var<'g>> {
        let data = (0..t).flat_map(|_| values.iter().copied()).collect();
        x.graph().constant(vec![t, N_MELS], data)
    }

    pub fn channel_normalize<'g>(
        x: Var<'g>,
        stats: &ChannelStats,
        p: SigmaExponent,
    ) -> Result<Var<'g>> {
        let t = rows_and_bins(&x, "channel_normalize")?;
        let mu = tile_constant(&x, &stats.mu, t)?;
        let inv: Vec<f64> = stats.sigma.iter().map(|&s| 1.0 / p.denominator(s)).collect();
        let inv = tile_constant(&x, &inv, t)?;
        x.sub(&mu)?.mul(&inv)
    }

    pub fn channel_inverse<'g>(
        x: Var<'g>,
        stats: &ChannelStats,
        p: SigmaExponent,
    ) -> Result<Var<'g>> {
        let t = rows_and_bins(&x, "channel_inverse")?;
        let scale: Vec<f64> = stats.sigma.iter().map(|&s| p.denominator(s)).collect();
        let scale = tile_constant(&x, &scale, t)?;
        let mu = tile_constant(&x, &stats.mu, t)?;
        x.mul(&scale)?.add(&mu)
    }

    /// Per-bin standardization with gradients through the statistics. The
    /// deviation is ‖x_k − μ_k‖₂/√T, so a constant bin has a zero (not
    /// infinite) gradient.
    pub fn instance_normalize<'g>(x: Var<'g>, p: SigmaExponent) -> Result<Var<'g>> {
        let t = rows_and_bins(&x, "instance_normalize")?;
        if t < 2 {
            return Err(Error::TooShort {
                required: 2,
                got: t,
                unit: "frames",
            });
        }
        let mu = x.mean(&Axes::along(0))?;
        let centered = x.sub(&tile_rows(mu, t)?)?;
        let sd = centered
            .l2norm(&Axes::along(0))?
            .scale(1.0 / (t as f64).sqrt())?;
        let denom = match p {
            SigmaExponent::One => sd.affine(1.0, NORM_EPS)?,
            SigmaExponent::Two => sd.square()?.affine(1.0, NORM_EPS)?,
        };
        centered.div(&tile_rows(denom, t)?)
    }

    pub fn apply_mask<'g>(x: Var<'g>, mask: Var<'g>) -> Result<Var<'g>> {
        if x.shape() != mask.shape() {
            return Err(Error::shape("apply_mask", &x.shape(), &mask.shape()));
        }
        x.mul(&mask)
    }
}
