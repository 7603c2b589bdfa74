//! 16 kHz mono 16-bit PCM WAV files.

use std::io::{Read, Seek, Write};
use std::path::Path;

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const FULL_SCALE: f64 = i16::MAX as f64;

fn format() -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

pub fn quantize(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * FULL_SCALE).round() as i16
}

pub fn write_to<W: Write + Seek>(out: W, w: &Waveform) -> Result<()> {
    let mut writer = hound::WavWriter::new(out, format())?;
    let mut samples = writer.get_i16_writer(w.len() as u32);
    for &s in w.samples() {
        samples.write_sample(quantize(s));
    }
    samples.flush()?;
    writer.finalize()?;
    Ok(())
}

pub fn write(path: &Path, w: &Waveform) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    write_to(std::io::BufWriter::new(file), w)
}

pub fn read_from<R: Read>(input: R) -> Result<Waveform> {
    let reader = hound::WavReader::new(input)?;
    let s = reader.spec();
    if s.channels != 1
        || s.sample_rate != SAMPLE_RATE
        || s.bits_per_sample != 16
        || s.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::format(
            "wav",
            format!(
                "expected 16 kHz mono 16-bit PCM, got {} Hz, {} ch, {} bit",
                s.sample_rate, s.channels, s.bits_per_sample
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|r| r.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples)
}

pub fn read(path: &Path) -> Result<Waveform> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_from(std::io::BufReader::new(file))
}
