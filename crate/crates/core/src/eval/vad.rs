use crate::dsp::{frame_count, Waveform, HOP_LENGTH, WIN_LENGTH};
use crate::error::{Error, Result};

/// Frames quieter than this relative to the loudest frame may be dropped.
pub const RELATIVE_THRESHOLD_DB: f64 = 40.0;
/// Below this the loudest frame counts as silence.
pub const ABSOLUTE_FLOOR_DB: f64 = -100.0;

fn frame_energy_db(frame: &[f64]) -> f64 {
    let ms = frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64;
    10.0 * (ms + 1e-30).log10()
}

/// Per-frame log energies on the 25 ms / 10 ms grid.
pub fn frame_energies(w: &Waveform) -> Vec<f64> {
    let s = w.samples();
    if s.len() < WIN_LENGTH {
        return vec![frame_energy_db(s)];
    }
    (0..frame_count(s.len()))
        .map(|t| frame_energy_db(&s[t * HOP_LENGTH..t * HOP_LENGTH + WIN_LENGTH]))
        .collect()
}

/// Energy-based voice activity detection.
///
/// A frame is dropped when its log energy is both more than 40 dB below the
/// loudest frame and below the utterance mean. Each frame owns the 10 ms hop
/// starting at its first sample (the last frame also owns the tail); owned
/// samples of surviving frames are concatenated.
pub fn energy_vad(w: &Waveform) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("empty waveform".into()));
    }
    let e = frame_energies(w);
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max < ABSOLUTE_FLOOR_DB {
        return Err(Error::NoSpeech);
    }
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    let s = w.samples();
    let mut out = Vec::with_capacity(s.len());
    for (t, &et) in e.iter().enumerate() {
        if et < max - RELATIVE_THRESHOLD_DB && et < mean {
            continue;
        }
        let start = t * HOP_LENGTH;
        let end = if t + 1 == e.len() {
            s.len()
        } else {
            start + HOP_LENGTH
        };
        out.extend_from_slice(&s[start..end]);
    }
    if out.is_empty() {
        return Err(Error::NoSpeech);
    }
    Waveform::new(out)
}
