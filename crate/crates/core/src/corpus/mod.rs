//! Deterministic synthetic speech corpus: clean, noisy and augmented training
//! splits with recorded clean pairings, plus disjoint clean/noisy test splits.

mod manifest;
mod synth;
pub mod wav;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use manifest::{Manifest, Split, UtteranceRecord};
pub use synth::{
    add, measured_snr, mix_at_snr, noise_gain, scaled_noise, synth_noise, synth_utterance,
    NoiseKind, Resonance, SpeakerModel, BABBLE_SPEAKER_BASE, N_RESONANCES, SPEECH_RMS,
};

use crate::dsp::{self, frame_count, Spectrogram, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_speakers: u32,
    pub train_utts_per_speaker: u32,
    pub test_speakers: u32,
    pub test_utts_per_speaker: u32,
    pub duration_range_s: [f64; 2],
    pub train_snr_range_db: [f64; 2],
    pub excluded_snrs_db: Vec<f64>,
    pub exclusion_window_db: f64,
    pub test_snrs_db: Vec<f64>,
    pub noise_kinds: Vec<NoiseKind>,
    /// Training utterances shorter than this are rejected.
    pub min_train_frames: usize,
    /// Training speakers with fewer clean utterances are rejected.
    pub min_train_utts: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_speakers: 20,
            train_utts_per_speaker: 12,
            test_speakers: 10,
            test_utts_per_speaker: 8,
            duration_range_s: [3.0, 6.0],
            train_snr_range_db: [0.0, 20.0],
            excluded_snrs_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            exclusion_window_db: 0.01,
            test_snrs_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            noise_kinds: NoiseKind::ALL.to_vec(),
            min_train_frames: 250,
            min_train_utts: 10,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<(&str, String)> = Vec::new();
        if self.train_speakers == 0 {
            bad.push(("corpus.train_speakers", "must be positive".into()));
        }
        if self.test_speakers < 2 {
            bad.push(("corpus.test_speakers", "need at least 2 test speakers".into()));
        }
        if self.train_utts_per_speaker < 2 {
            bad.push(("corpus.train_utts_per_speaker", "need at least 2".into()));
        }
        if self.test_utts_per_speaker < 2 {
            bad.push(("corpus.test_utts_per_speaker", "need at least 2".into()));
        }
        if self.train_utts_per_speaker < self.min_train_utts {
            bad.push((
                "corpus.min_train_utts",
                format!(
                    "{} exceeds train_utts_per_speaker {}",
                    self.min_train_utts, self.train_utts_per_speaker
                ),
            ));
        }
        let [d_lo, d_hi] = self.duration_range_s;
        if !(d_lo >= 1.0 && d_lo <= d_hi && d_hi <= 60.0) {
            bad.push((
                "corpus.duration_range_s",
                format!("[{d_lo}, {d_hi}] must satisfy 1 <= lo <= hi <= 60"),
            ));
        } else if frame_count((d_lo * SAMPLE_RATE as f64).round() as usize) < self.min_train_frames {
            bad.push((
                "corpus.min_train_frames",
                format!(
                    "{} frames exceeds what a {d_lo} s utterance provides",
                    self.min_train_frames
                ),
            ));
        }
        let [s_lo, s_hi] = self.train_snr_range_db;
        if !(s_lo.is_finite() && s_hi.is_finite() && s_lo < s_hi) {
            bad.push(("corpus.train_snr_range_db", format!("[{s_lo}, {s_hi}] is empty")));
        }
        if !(self.exclusion_window_db >= 0.0 && self.exclusion_window_db.is_finite()) {
            bad.push(("corpus.exclusion_window_db", "must be non-negative".into()));
        }
        let excluded_width = 2.0 * self.exclusion_window_db * self.excluded_snrs_db.len() as f64;
        if s_lo < s_hi && excluded_width >= 0.5 * (s_hi - s_lo) {
            bad.push((
                "corpus.exclusion_window_db",
                "exclusions cover too much of the training SNR range".into(),
            ));
        }
        if self.test_snrs_db.is_empty() || self.test_snrs_db.iter().any(|v| !v.is_finite()) {
            bad.push(("corpus.test_snrs_db", "need at least one finite SNR".into()));
        }
        if self.noise_kinds.is_empty() {
            bad.push(("corpus.noise_kinds", "need at least one noise kind".into()));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            let fields: Vec<&str> = bad.iter().map(|(f, _)| *f).collect();
            let detail: Vec<String> = bad.iter().map(|(f, m)| format!("{f}: {m}")).collect();
            Err(Error::validation(fields.join(","), detail.join("; ")))
        }
    }

    pub fn total_speakers(&self) -> u32 {
        self.train_speakers + self.test_speakers
    }

    /// Number of manifest records the configuration produces.
    pub fn expected_records(&self) -> usize {
        let train = (self.train_speakers * self.train_utts_per_speaker) as usize;
        let test = (self.test_speakers * self.test_utts_per_speaker) as usize;
        4 * train + 2 * test
    }

    fn is_excluded(&self, snr: f64) -> bool {
        self.excluded_snrs_db
            .iter()
            .any(|&x| (snr - x).abs() <= self.exclusion_window_db)
    }

    /// Uniform over the open training range, rejecting the excluded points.
    pub fn sample_train_snr<R: Rng>(&self, rng: &mut R) -> f64 {
        let [lo, hi] = self.train_snr_range_db;
        loop {
            let v = rng.gen_range(lo..hi);
            if v > lo && !self.is_excluded(v) {
                return v;
            }
        }
    }
}

/// Hex SHA-256 of the canonical TOML form of `(config, seed)`.
pub fn config_hash(cfg: &CorpusConfig, seed: u64) -> String {
    #[derive(Serialize)]
    struct Keyed<'a> {
        seed: u64,
        corpus: &'a CorpusConfig,
    }
    let text = toml::to_string(&Keyed { seed, corpus: cfg }).expect("corpus config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// The noise that turned `source_id` into this utterance.
#[derive(Debug, Clone)]
pub struct MixInfo {
    pub source_id: String,
    pub kind: NoiseKind,
    pub scaled_noise: Waveform,
}

#[derive(Debug, Clone)]
pub struct GeneratedUtterance {
    pub record: UtteranceRecord,
    pub waveform: Waveform,
    pub mix: Option<MixInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Group {
    pub speaker_id: u32,
    pub utt_index: u32,
    pub test: bool,
}

/// Generation units in manifest order: every training (speaker, utterance),
/// then every test one. Test speakers follow the training ids.
pub fn groups(cfg: &CorpusConfig) -> Vec<Group> {
    let train = (0..cfg.train_speakers).flat_map(|s| {
        (0..cfg.train_utts_per_speaker).map(move |u| Group {
            speaker_id: s,
            utt_index: u,
            test: false,
        })
    });
    let test = (0..cfg.test_speakers).flat_map(|s| {
        (0..cfg.test_utts_per_speaker).map(move |u| Group {
            speaker_id: cfg.train_speakers + s,
            utt_index: u,
            test: true,
        })
    });
    train.chain(test).collect()
}

fn audio_path(split: Split, utt_id: &str) -> String {
    format!("audio/{}/{utt_id}.wav", split.as_str())
}

fn record(utt_id: String, speaker_id: u32, split: Split, snr: Option<f64>, paired: Option<&str>) -> UtteranceRecord {
    UtteranceRecord {
        path: audio_path(split, &utt_id),
        utt_id,
        speaker_id,
        split,
        snr_db: snr,
        paired_clean_id: paired.map(str::to_string),
    }
}

/// Synthesizes every utterance of one group. Pure in `(cfg, seed, group)`.
///
/// Training groups yield four records:
/// - clean `C`
/// - noisy `N = C + n₁` at a training SNR, paired with `C`
/// - clean-aug `A = C + a` at an augmentation SNR, paired with `C`
/// - noisy-aug: for even utterance indices `N + n₂` paired with `C`; for odd
///   ones `N + a` (the same scaled noise as `A`) paired with `A`, so the
///   enhancer is not asked to remove the shared augmentation
pub fn generate_group(cfg: &CorpusConfig, seed: u64, group: Group) -> Result<Vec<GeneratedUtterance>> {
    let spk = SpeakerModel::generate(group.speaker_id, seed);
    let mut rng = seed::rng(
        seed,
        &[tag::MIX, group.speaker_id as u64, group.utt_index as u64],
    );
    let [d_lo, d_hi] = cfg.duration_range_s;
    let duration = if d_lo < d_hi {
        rng.gen_range(d_lo..=d_hi)
    } else {
        d_lo
    };
    let clean = synth_utterance(&spk, duration, group.utt_index as u64)?;
    let base = format!("s{:03}u{:02}", group.speaker_id, group.utt_index);
    let pick_noise = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<(NoiseKind, Waveform)> {
        let kind = cfg.noise_kinds[rng.gen_range(0..cfg.noise_kinds.len())];
        let noise = synth_noise(kind, clean.duration_s(), rng.gen())?;
        Ok((kind, noise))
    };
    let mixed = |source: &Waveform, source_id: &str, kind, noise: &Waveform, snr| -> Result<(Waveform, MixInfo)> {
        let scaled = scaled_noise(source, noise, snr)?;
        let out = add(source, &scaled)?;
        Ok((
            out,
            MixInfo {
                source_id: source_id.to_string(),
                kind,
                scaled_noise: scaled,
            },
        ))
    };

    let spk_id = group.speaker_id;
    let mut out = Vec::with_capacity(4);
    if group.test {
        let clean_id = base.clone();
        let (kind, noise) = pick_noise(&mut rng)?;
        let snr = cfg.test_snrs_db[rng.gen_range(0..cfg.test_snrs_db.len())];
        let (noisy, mix) = mixed(&clean, &clean_id, kind, &noise, snr)?;
        out.push(GeneratedUtterance {
            record: record(clean_id.clone(), spk_id, Split::TestClean, None, None),
            waveform: clean,
            mix: None,
        });
        out.push(GeneratedUtterance {
            record: record(format!("{base}-tn"), spk_id, Split::TestNoisy, Some(snr), Some(&clean_id)),
            waveform: noisy,
            mix: Some(mix),
        });
        return Ok(out);
    }

    if frame_count(clean.len()) < cfg.min_train_frames {
        return Err(Error::validation(
            "corpus.min_train_frames",
            format!("{base} has {} frames", frame_count(clean.len())),
        ));
    }
    let clean_id = base.clone();
    let noisy_id = format!("{base}-n");
    let caug_id = format!("{base}-ca");
    let naug_id = format!("{base}-na");

    let (kind, noise) = pick_noise(&mut rng)?;
    let snr_n = cfg.sample_train_snr(&mut rng);
    let (noisy, mix_n) = mixed(&clean, &clean_id, kind, &noise, snr_n)?;

    let (kind_a, noise_a) = pick_noise(&mut rng)?;
    let (lo, hi) = kind_a.augmentation_snr_range();
    let snr_a = rng.gen_range(lo..=hi);
    let (caug, mix_a) = mixed(&clean, &clean_id, kind_a, &noise_a, snr_a)?;

    let (naug, mix_na, snr_na, naug_pair) = if group.utt_index % 2 == 0 {
        let (kind_m, noise_m) = pick_noise(&mut rng)?;
        let (lo, hi) = kind_m.augmentation_snr_range();
        let snr = rng.gen_range(lo..=hi);
        let (w, mix) = mixed(&noisy, &noisy_id, kind_m, &noise_m, snr)?;
        (w, mix, snr, clean_id.clone())
    } else {
        let shared = mix_a.scaled_noise.clone();
        let w = add(&noisy, &shared)?;
        let snr = 10.0 * (noisy.power() / shared.power()).log10();
        let mix = MixInfo {
            source_id: noisy_id.clone(),
            kind: kind_a,
            scaled_noise: shared,
        };
        (w, mix, snr, caug_id.clone())
    };

    out.push(GeneratedUtterance {
        record: record(clean_id.clone(), spk_id, Split::TrainClean, None, None),
        waveform: clean,
        mix: None,
    });
    out.push(GeneratedUtterance {
        record: record(noisy_id, spk_id, Split::TrainNoisy, Some(snr_n), Some(&clean_id)),
        waveform: noisy,
        mix: Some(mix_n),
    });
    out.push(GeneratedUtterance {
        record: record(caug_id, spk_id, Split::TrainCleanAug, Some(snr_a), Some(&clean_id)),
        waveform: caug,
        mix: Some(mix_a),
    });
    out.push(GeneratedUtterance {
        record: record(naug_id, spk_id, Split::TrainNoisyAug, Some(snr_na), Some(&naug_pair)),
        waveform: naug,
        mix: Some(mix_na),
    });
    Ok(out)
}

/// Generates the whole corpus in manifest order, handing every utterance to
/// `sink` as it is produced.
pub fn build_corpus<F>(cfg: &CorpusConfig, seed: u64, mut sink: F) -> Result<Manifest>
where
    F: FnMut(&GeneratedUtterance) -> Result<()>,
{
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.expected_records());
    for group in groups(cfg) {
        for utt in generate_group(cfg, seed, group)? {
            sink(&utt)?;
            records.push(utt.record);
        }
    }
    finish_manifest(cfg, seed, records)
}

fn finish_manifest(cfg: &CorpusConfig, seed: u64, mut records: Vec<UtteranceRecord>) -> Result<Manifest> {
    // stable order: by split, then generation order
    records.sort_by_key(|r| r.split);
    let manifest = Manifest {
        records,
        speaker_count: cfg.total_speakers(),
        config_hash: config_hash(cfg, seed),
    };
    manifest.validate(cfg.min_train_utts as usize)?;
    Ok(manifest)
}

fn dir_is_empty(dir: &Path) -> Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut entries) => Ok(entries.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(Error::file(dir, e)),
    }
}

/// Writes the WAV tree and `manifest.tsv` under `dir`. An existing non-empty
/// directory is refused unless `force` is set.
pub fn write_corpus(cfg: &CorpusConfig, seed: u64, dir: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    if !dir_is_empty(dir)? && !force {
        return Err(Error::validation(
            "output",
            format!("{} already exists; pass --force to overwrite", dir.display()),
        ));
    }
    for split in Split::ALL {
        let sub = dir.join("audio").join(split.as_str());
        std::fs::create_dir_all(&sub).map_err(|e| Error::file(&sub, e))?;
    }
    let per_group: Vec<Vec<UtteranceRecord>> = groups(cfg)
        .into_par_iter()
        .map(|group| {
            generate_group(cfg, seed, group)?
                .into_iter()
                .map(|utt| {
                    wav::write(&dir.join(&utt.record.path), &utt.waveform)?;
                    Ok(utt.record)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let manifest = finish_manifest(cfg, seed, per_group.into_iter().flatten().collect())?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_tsv()).map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}

/// A manifest plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Manifest::parse(&text)?,
        })
    }

    pub fn audio(&self, rec: &UtteranceRecord) -> Result<Waveform> {
        wav::read(&self.root.join(&rec.path))
    }

    /// Log-Mel features for every record matching `keep`.
    pub fn features<F>(&self, keep: F) -> Result<HashMap<String, Spectrogram>>
    where
        F: Fn(&UtteranceRecord) -> bool + Sync,
    {
        self.manifest
            .records
            .par_iter()
            .filter(|r| keep(r))
            .map(|r| Ok((r.utt_id.clone(), dsp::logmel(&self.audio(r)?)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny() -> CorpusConfig {
        CorpusConfig {
            train_speakers: 3,
            train_utts_per_speaker: 3,
            test_speakers: 2,
            test_utts_per_speaker: 2,
            duration_range_s: [1.0, 1.5],
            min_train_frames: 90,
            min_train_utts: 2,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn default_config_counts() {
        let cfg = CorpusConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.expected_records(), 4 * 240 + 2 * 80);
        assert_eq!(groups(&cfg).len(), 240 + 80);
    }

    #[test]
    fn invalid_configs_name_fields() {
        let cfg = CorpusConfig {
            train_snr_range_db: [20.0, 0.0],
            test_speakers: 1,
            ..CorpusConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("corpus.train_snr_range_db"), "{err}");
        assert!(err.contains("corpus.test_speakers"), "{err}");
        let cfg = CorpusConfig {
            min_train_frames: 500,
            ..CorpusConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("min_train_frames"));
    }

    #[test]
    fn snr_sampling_avoids_exclusions() {
        let cfg = CorpusConfig::default();
        let mut rng = seed::rng(0, &[]);
        for _ in 0..20_000 {
            let v = cfg.sample_train_snr(&mut rng);
            assert!(v > 0.0 && v < 20.0);
            assert!(cfg.excluded_snrs_db.iter().all(|x| (v - x).abs() > 0.01));
        }
    }

    #[test]
    fn built_corpus_invariants() {
        let cfg = tiny();
        let mut mixes = Vec::new();
        let mut waves: HashMap<String, Waveform> = HashMap::new();
        let manifest = build_corpus(&cfg, 7, |u| {
            waves.insert(u.record.utt_id.clone(), u.waveform.clone());
            if let Some(m) = &u.mix {
                mixes.push((u.record.clone(), m.clone()));
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(manifest.records.len(), cfg.expected_records());
        assert_eq!(manifest.count(Split::TrainClean), 9);
        assert_eq!(manifest.count(Split::TrainNoisy), 9);
        assert_eq!(manifest.count(Split::TestNoisy), 4);
        let train: HashSet<u32> = manifest.train_speakers().into_iter().collect();
        assert!(manifest.test_speakers().iter().all(|s| !train.contains(s)));

        for (rec, mix) in &mixes {
            let source = &waves[&mix.source_id];
            let out = &waves[&rec.utt_id];
            for i in 0..out.len() {
                assert_eq!(out.samples()[i], source.samples()[i] + mix.scaled_noise.samples()[i]);
            }
            let snr = 10.0 * (source.power() / mix.scaled_noise.power()).log10();
            assert!((snr - rec.snr_db.unwrap()).abs() < 1e-6, "{}", rec.utt_id);
            match rec.split {
                Split::TrainNoisy => assert!(!cfg.is_excluded(rec.snr_db.unwrap())),
                Split::TestNoisy => assert!(cfg.test_snrs_db.contains(&rec.snr_db.unwrap())),
                _ => {}
            }
        }
        // both aug pairings are present
        let by_id = manifest.by_id();
        let pair_splits: HashSet<Split> = manifest
            .records_in(Split::TrainNoisyAug)
            .map(|r| by_id[r.paired_clean_id.as_deref().unwrap()].split)
            .collect();
        assert_eq!(pair_splits, HashSet::from([Split::TrainClean, Split::TrainCleanAug]));
    }

    #[test]
    fn write_refuses_existing_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let m1 = write_corpus(&cfg, 1, dir.path(), false).unwrap();
        assert!(write_corpus(&cfg, 1, dir.path(), false).is_err());
        let m2 = write_corpus(&cfg, 1, dir.path(), true).unwrap();
        assert_eq!(m1, m2);
        let opened = Corpus::open(dir.path()).unwrap();
        assert_eq!(opened.manifest, m1);
        let feats = opened.features(|r| r.split == Split::TestClean).unwrap();
        assert_eq!(feats.len(), 4);
    }
}
