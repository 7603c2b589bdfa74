//! Parametric speakers, noise generators and SNR-controlled mixing.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

/// RMS of every synthesized clean utterance before the noise floor is added.
pub const SPEECH_RMS: f64 = 0.05;
/// Background floor under clean speech, relative to [`SPEECH_RMS`].
const FLOOR_RMS_RATIO: f64 = 1e-3;
pub const N_RESONANCES: usize = 5;
/// Speaker ids at or above this value are reserved for babble talkers.
pub const BABBLE_SPEAKER_BASE: u32 = 1_000_000;

const BASE_FORMANTS: [f64; N_RESONANCES] = [600.0, 1450.0, 2500.0, 3500.0, 4500.0];
/// Shared "vowel" perturbations of the two lowest resonances. Content varies
/// across syllables; speaker identity lives in the base resonances and pitch.
const VOWELS: [(f64, f64); 6] = [
    (1.00, 1.00),
    (0.75, 1.25),
    (1.25, 0.85),
    (0.85, 0.75),
    (1.10, 1.15),
    (0.92, 1.05),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerModel {
    pub speaker_id: u32,
    pub f0_range: (f64, f64),
    pub resonances: Vec<Resonance>,
    pub seed: u64,
}

impl SpeakerModel {
    /// Draws a speaker deterministically from `(corpus_seed, speaker_id)`.
    pub fn generate(speaker_id: u32, corpus_seed: u64) -> Self {
        let seed = seed::derive(corpus_seed, &[tag::SPEAKER, speaker_id as u64]);
        let mut rng = seed::rng(seed, &[]);
        let tract = rng.gen_range(0.8..1.22);
        let f0_lo = rng.gen_range(85.0..210.0);
        let f0_hi = (f0_lo * rng.gen_range(1.25..1.7_f64)).min(400.0);
        let strongest = rng.gen_range(0..N_RESONANCES);
        let resonances = BASE_FORMANTS
            .iter()
            .enumerate()
            .map(|(i, &base)| {
                let center_hz = base * tract * rng.gen_range(0.9..1.1);
                let gain = if i == strongest {
                    1.0
                } else {
                    rng.gen_range(0.2..0.6)
                };
                Resonance {
                    center_hz,
                    bandwidth_hz: rng.gen_range(70.0..110.0) + 0.04 * center_hz,
                    gain,
                }
            })
            .collect();
        Self {
            speaker_id,
            f0_range: (f0_lo, f0_hi),
            resonances,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.f0_range;
        if !(80.0..=400.0).contains(&lo) || !(80.0..=400.0).contains(&hi) || lo > hi {
            return Err(Error::validation(
                "speaker.f0_range",
                format!("({lo}, {hi}) must lie inside [80, 400] Hz"),
            ));
        }
        if self.resonances.len() < 2 {
            return Err(Error::validation(
                "speaker.resonances",
                "at least two resonances required",
            ));
        }
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        for r in &self.resonances {
            if !(r.center_hz > 0.0 && r.center_hz < nyquist && r.bandwidth_hz > 0.0 && r.gain >= 0.0)
            {
                return Err(Error::validation(
                    "speaker.resonances",
                    format!("invalid resonance {r:?}"),
                ));
            }
        }
        Ok(())
    }

    pub fn strongest_resonance(&self) -> &Resonance {
        self.resonances
            .iter()
            .max_by(|a, b| a.gain.total_cmp(&b.gain))
            .expect("validated speakers have resonances")
    }
}

/// Constant-peak-gain band-pass biquad.
#[derive(Debug, Clone, Copy, Default)]
struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, center_hz: f64, bandwidth_hz: f64) {
        let w0 = 2.0 * PI * center_hz / SAMPLE_RATE as f64;
        let q = center_hz / bandwidth_hz;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        self.b0 = alpha / a0;
        self.a1 = -2.0 * w0.cos() / a0;
        self.a2 = (1.0 - alpha) / a0;
    }

    fn process(&mut self, x: f64) -> f64 {
        // b1 = 0, b2 = -b0
        let y = self.b0 * (x - self.x2) - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn scale_to_rms(x: &mut [f64], rms: f64) {
    let p = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    if p > 0.0 {
        let g = rms / p.sqrt();
        x.iter_mut().for_each(|v| *v *= g);
    }
}

fn samples_for(duration_s: f64) -> usize {
    (duration_s * SAMPLE_RATE as f64).round() as usize
}

fn voiced_signal(spk: &SpeakerModel, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let (f0_lo, f0_hi) = spk.f0_range;
    let mut bank: Vec<Resonator> = vec![Resonator::default(); spk.resonances.len()];
    let mut out = vec![0.0; n];

    let mut f0 = rng.gen_range(f0_lo..=f0_hi);
    let mut phase = 0.0;
    let mut pos = 0;
    while pos < n {
        let syl_len = (rng.gen_range(0.12..0.35) * fs) as usize;
        let gap = if rng.gen_bool(0.35) {
            (rng.gen_range(0.03..0.15) * fs) as usize
        } else {
            0
        };
        let (v1, v2) = VOWELS[rng.gen_range(0..VOWELS.len())];
        for (i, (res, r)) in bank.iter_mut().zip(&spk.resonances).enumerate() {
            let shift = match i {
                0 => v1,
                1 => v2,
                _ => 1.0,
            } * rng.gen_range(0.97..1.03);
            let center = (r.center_hz * shift).min(fs / 2.0 - 200.0);
            res.tune(center, r.bandwidth_hz);
        }
        let end = (pos + syl_len).min(n);
        let edge = (0.02 * fs) as usize;
        for (k, slot) in out[pos..end].iter_mut().enumerate() {
            // pitch random walk, reflected into the speaker's range
            f0 += rng.gen_range(-0.4..0.4);
            if f0 < f0_lo {
                f0 = 2.0 * f0_lo - f0;
            }
            if f0 > f0_hi {
                f0 = 2.0 * f0_hi - f0;
            }
            f0 = f0.clamp(f0_lo, f0_hi);
            phase += f0 / fs;
            let mut excitation = 0.03 * rng.sample::<f64, _>(StandardNormal);
            if phase >= 1.0 {
                phase -= 1.0;
                excitation += 1.0;
            }
            let y: f64 = bank
                .iter_mut()
                .zip(&spk.resonances)
                .map(|(res, r)| r.gain * res.process(excitation))
                .sum();
            let len = end - pos;
            let env = if k < edge {
                0.5 - 0.5 * (PI * k as f64 / edge as f64).cos()
            } else if k + edge > len {
                0.5 - 0.5 * (PI * (len - k) as f64 / edge as f64).cos()
            } else {
                1.0
            };
            *slot = y * env;
        }
        pos = end;
        // silence lets the resonators ring down
        for slot in out.iter_mut().skip(pos).take(gap) {
            *slot = bank
                .iter_mut()
                .zip(&spk.resonances)
                .map(|(res, r)| r.gain * res.process(0.0))
                .sum::<f64>();
        }
        pos += gap;
    }
    out
}

/// Pulse-train excitation with a random-walk pitch, shaped by the speaker's
/// resonances, enveloped per syllable. Deterministic in `(spk.seed, seed)`.
pub fn synth_utterance(spk: &SpeakerModel, duration_s: f64, seed: u64) -> Result<Waveform> {
    if !(duration_s >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "utterance duration must be at least 1 s, got {duration_s}"
        )));
    }
    spk.validate()?;
    let mut rng = seed::rng(spk.seed, &[tag::UTTERANCE, seed]);
    let n = samples_for(duration_s);
    let mut x = voiced_signal(spk, n, &mut rng);
    scale_to_rms(&mut x, SPEECH_RMS);
    let floor = SPEECH_RMS * FLOOR_RMS_RATIO;
    for v in x.iter_mut() {
        *v += floor * rng.sample::<f64, _>(StandardNormal);
    }
    Waveform::new(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Tonal,
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [Self::White, Self::Pink, Self::Tonal, Self::Babble];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::White => "white",
            Self::Pink => "pink",
            Self::Tonal => "tonal",
            Self::Babble => "babble",
        }
    }

    /// SNR range (dB) used when this kind augments an existing utterance.
    pub fn augmentation_snr_range(self) -> (f64, f64) {
        match self {
            Self::White | Self::Pink => (0.0, 15.0),
            Self::Tonal => (5.0, 15.0),
            Self::Babble => (13.0, 20.0),
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

fn white(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// White noise shaped to a 1/f power spectrum in the frequency domain.
fn pink(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = white(n, rng)
        .into_iter()
        .map(|v| Complex::new(v, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for k in 1..n {
        let bin = k.min(n - k) as f64;
        buf[k] /= bin.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

fn tonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let count = rng.gen_range(2..=5);
    let tones: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.gen_range(150.0..4000.0),
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            tones
                .iter()
                .map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum()
        })
        .collect()
}

fn babble(duration_s: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = seed::rng(seed, &[tag::BABBLE]);
    let n = samples_for(duration_s);
    let mut out = vec![0.0; n];
    for _ in 0..4 {
        let id = BABBLE_SPEAKER_BASE + rng.gen_range(0..1_000_000);
        let talker = SpeakerModel::generate(id, seed);
        let w = synth_utterance(&talker, duration_s.max(1.0), rng.gen())?;
        out.iter_mut().zip(w.samples()).for_each(|(o, s)| *o += s);
    }
    Ok(out)
}

/// Unit-power noise of the given kind. Babble sums four talkers drawn from
/// the reserved id range, so it never leaks corpus speakers.
pub fn synth_noise(kind: NoiseKind, duration_s: f64, seed: u64) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise duration must be positive, got {duration_s}"
        )));
    }
    let n = samples_for(duration_s).max(1);
    let mut rng = seed::rng(seed, &[tag::NOISE, kind.index()]);
    let mut x = match kind {
        NoiseKind::White => white(n, &mut rng),
        NoiseKind::Pink => pink(n, &mut rng),
        NoiseKind::Tonal => tonal(n, &mut rng),
        NoiseKind::Babble => babble(duration_s.max(1.0), rng.gen())?,
    };
    x.truncate(n);
    scale_to_rms(&mut x, 1.0);
    Waveform::new(x)
}

/// Gain α such that 10·log10(P_clean / P(α·noise)) = snr_db over the clean
/// utterance's support.
pub fn noise_gain(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    if noise.len() < clean.len() {
        return Err(Error::TooShort {
            required: clean.len(),
            got: noise.len(),
            unit: "noise samples",
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr {snr_db} dB")));
    }
    let p_clean = clean.power();
    if p_clean == 0.0 {
        return Err(Error::InvalidArgument(
            "cannot mix at an SNR against a silent signal".into(),
        ));
    }
    let cropped = &noise.samples()[..clean.len()];
    let p_noise = cropped.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
    if p_noise == 0.0 {
        return Err(Error::InvalidArgument("noise segment is silent".into()));
    }
    Ok((p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// The noise actually added by [`mix_at_snr`]: `α·noise` cropped to the clean length.
pub fn scaled_noise(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    let alpha = noise_gain(clean, noise, snr_db)?;
    Waveform::new(
        noise.samples()[..clean.len()]
            .iter()
            .map(|v| alpha * v)
            .collect(),
    )
}

pub fn add(signal: &Waveform, noise: &Waveform) -> Result<Waveform> {
    if noise.len() < signal.len() {
        return Err(Error::TooShort {
            required: signal.len(),
            got: noise.len(),
            unit: "noise samples",
        });
    }
    Waveform::new(
        signal
            .samples()
            .iter()
            .zip(noise.samples())
            .map(|(s, n)| s + n)
            .collect(),
    )
}

/// clean + α·noise at the requested SNR.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    add(clean, &scaled_noise(clean, noise, snr_db)?)
}

/// 10·log10(P_clean / P(noisy − clean)).
pub fn measured_snr(clean: &Waveform, noisy: &Waveform) -> f64 {
    let n = clean.len().min(noisy.len());
    let p_noise = (0..n)
        .map(|i| {
            let d = noisy.samples()[i] - clean.samples()[i];
            d * d
        })
        .sum::<f64>()
        / n as f64;
    10.0 * (clean.power() / p_noise).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{hz_to_mel, mel_filterbank};

    fn periodogram(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        buf[..n / 2 + 1].iter().map(|c| c.norm_sqr() / n as f64).collect()
    }

    /// Averaged Hann-windowed periodogram (Welch).
    fn welch(x: &[f64], seg: usize) -> Vec<f64> {
        let win: Vec<f64> = (0..seg)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos())
            .collect();
        let mut acc = vec![0.0; seg / 2 + 1];
        let mut count = 0.0;
        let mut start = 0;
        while start + seg <= x.len() {
            let frame: Vec<f64> = x[start..start + seg]
                .iter()
                .zip(&win)
                .map(|(a, w)| a * w)
                .collect();
            acc.iter_mut()
                .zip(periodogram(&frame))
                .for_each(|(a, p)| *a += p);
            count += 1.0;
            start += seg / 2;
        }
        acc.iter_mut().for_each(|a| *a /= count);
        acc
    }

    #[test]
    fn utterances_are_deterministic_and_speaker_specific() {
        let a = SpeakerModel::generate(0, 42);
        let b = SpeakerModel::generate(1, 42);
        let x1 = synth_utterance(&a, 1.5, 9).unwrap();
        let x2 = synth_utterance(&a, 1.5, 9).unwrap();
        assert_eq!(x1, x2);
        let y = synth_utterance(&b, 1.5, 9).unwrap();
        let dist: f64 = x1
            .samples()
            .iter()
            .zip(y.samples())
            .map(|(p, q)| (p - q).powi(2))
            .sum();
        assert!(dist > 0.0);
        assert!(synth_utterance(&a, 0.5, 0).is_err());
    }

    #[test]
    fn speakers_are_valid() {
        for id in 0..100 {
            let s = SpeakerModel::generate(id, 3);
            s.validate().unwrap();
            assert_eq!(s.resonances.len(), N_RESONANCES);
        }
    }

    #[test]
    fn long_term_spectrum_peaks_near_strongest_resonance() {
        let fb = mel_filterbank();
        let bin_of = |hz: f64| fb.nearest_bin(hz) as i64;
        for id in 0..12 {
            let spk = SpeakerModel::generate(id, 5);
            let x = synth_utterance(&spk, 4.0, 1).unwrap();
            let psd = welch(x.samples(), 1024);
            let peak_k = (1..psd.len())
                .max_by(|&a, &b| psd[a].total_cmp(&psd[b]))
                .unwrap();
            let peak_hz = peak_k as f64 * SAMPLE_RATE as f64 / 1024.0;
            let target = spk.strongest_resonance().center_hz;
            let diff = (bin_of(peak_hz) - bin_of(target)).abs();
            assert!(
                diff <= 1,
                "speaker {id}: peak {peak_hz:.0} Hz (mel {:.0}) vs resonance {target:.0} Hz (mel {:.0})",
                hz_to_mel(peak_hz),
                hz_to_mel(target)
            );
        }
    }

    #[test]
    fn noise_is_unit_power() {
        for kind in NoiseKind::ALL {
            let w = synth_noise(kind, 1.3, 4).unwrap();
            assert!((w.power() - 1.0).abs() < 1e-6, "{kind:?}");
            assert_eq!(w.len(), 20800);
        }
    }

    #[test]
    fn white_noise_is_centered() {
        let w = synth_noise(NoiseKind::White, 2.0, 8).unwrap();
        let mean = w.samples().iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 / (w.len() as f64).sqrt());
    }

    #[test]
    fn pink_noise_slope() {
        let w = synth_noise(NoiseKind::Pink, 6.0, 21).unwrap();
        let psd = welch(w.samples(), 2048);
        let df = SAMPLE_RATE as f64 / 2048.0;
        // least squares of dB against octaves over 100–4000 Hz
        let pts: Vec<(f64, f64)> = (1..psd.len())
            .map(|k| (k as f64 * df, psd[k]))
            .filter(|(f, _)| (100.0..=4000.0).contains(f))
            .map(|(f, p)| (f.log2(), 10.0 * p.log10()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((slope + 3.0).abs() <= 1.0, "slope {slope:.2} dB/octave");
    }

    #[test]
    fn tonal_noise_has_few_peaks() {
        for seed in 0..5 {
            let w = synth_noise(NoiseKind::Tonal, 2.0, seed).unwrap();
            let psd = welch(w.samples(), 4096);
            let max = psd.iter().cloned().fold(0.0, f64::max);
            let thresh = max * 10f64.powf(-2.0);
            let peaks = (1..psd.len() - 1)
                .filter(|&k| psd[k] > thresh && psd[k] > psd[k - 1] && psd[k] >= psd[k + 1])
                .count();
            assert!(peaks <= 5 && peaks >= 1, "seed {seed}: {peaks} peaks");
        }
    }

    #[test]
    fn mixing_gain_examples() {
        let clean = Waveform::new(vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let noise = Waveform::new(vec![-1.0, -1.0, 1.0, 1.0, 7.0]).unwrap();
        assert!((noise_gain(&clean, &noise, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((noise_gain(&clean, &noise, 20.0).unwrap() - 0.1).abs() < 1e-15);
        let silent = Waveform::new(vec![0.0; 4]).unwrap();
        assert!(mix_at_snr(&silent, &noise, 5.0).is_err());
        assert!(mix_at_snr(&noise, &clean, 5.0).is_err());
    }

    #[test]
    fn measured_snr_matches_request() {
        let spk = SpeakerModel::generate(3, 1);
        let clean = synth_utterance(&spk, 1.2, 2).unwrap();
        for (i, kind) in NoiseKind::ALL.into_iter().enumerate() {
            let noise = synth_noise(kind, 1.5, i as u64).unwrap();
            for snr in [-3.3, 0.0, 7.25, 19.99] {
                let noisy = mix_at_snr(&clean, &noise, snr).unwrap();
                assert!((measured_snr(&clean, &noisy) - snr).abs() < 1e-9);
            }
        }
    }
}
