//! Speaker-verification evaluation: trials, VAD, cosine scoring, EER and
//! minDCF.

mod metrics;
mod report;
mod trials;
mod vad;

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{
    check_prior, eer, eer_from_points, min_dcf, min_dcf_from_points, normalized_dcf, ScoreSet,
};
pub use report::{Condition, Report, ReportEntry};
pub use trials::{
    build_trials, format_scores, format_trials, parse_scores, parse_trials, ScoredTrial, Trial,
};
pub use vad::{energy_vad, frame_energies, ABSOLUTE_FLOOR_DB, RELATIVE_THRESHOLD_DB};

use crate::corpus::{Corpus, Manifest, Split};
use crate::dsp::{self, Waveform};
use crate::error::{Error, Result};
use crate::models::Pipeline;

pub const BACKEND: &str = "cosine";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trials_per_speaker: usize,
    pub p_target: f64,
    pub vad: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials_per_speaker: 40,
            p_target: 0.05,
            vad: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        check_prior(self.p_target).map_err(|e| Error::validation("eval.p_target", e.to_string()))?;
        if self.trials_per_speaker < 2 {
            return Err(Error::validation("eval.trials_per_speaker", "must be at least 2"));
        }
        Ok(())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Maps each clean test utterance id to the utterance used for it under
/// `condition`: itself, or its noisy counterpart.
pub fn condition_ids(manifest: &Manifest, condition: Condition) -> Result<HashMap<String, String>> {
    let map: HashMap<String, String> = match condition {
        Condition::Clean => manifest
            .records_in(Split::TestClean)
            .map(|r| (r.utt_id.clone(), r.utt_id.clone()))
            .collect(),
        Condition::Noisy => manifest
            .records_in(Split::TestNoisy)
            .filter_map(|r| r.paired_clean_id.clone().map(|c| (c, r.utt_id.clone())))
            .collect(),
    };
    if map.is_empty() {
        return Err(Error::validation(
            "condition",
            format!("manifest has no test split for the {condition} condition"),
        ));
    }
    Ok(map)
}

/// VAD (optional), log-Mel and the pipeline.
pub fn embed_waveform(pipeline: &Pipeline<'_>, w: &Waveform, vad: bool) -> Result<Vec<f64>> {
    let feats = if vad {
        dsp::logmel(&energy_vad(w)?)?
    } else {
        dsp::logmel(w)?
    };
    pipeline.embed(&feats)
}

/// Scores every trial under `condition`. Embeddings are computed once per
/// utterance, in parallel.
pub fn score_trials(
    pipeline: &Pipeline<'_>,
    corpus: &Corpus,
    trials: &[Trial],
    condition: Condition,
    vad: bool,
) -> Result<Vec<ScoredTrial>> {
    let ids = condition_ids(&corpus.manifest, condition)?;
    let resolve = |clean: &str| -> Result<&str> {
        ids.get(clean).map(String::as_str).ok_or_else(|| {
            Error::validation("trials", format!("{clean} has no {condition} utterance"))
        })
    };
    let needed: BTreeSet<&str> = trials
        .iter()
        .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
        .map(resolve)
        .collect::<Result<_>>()?;
    let by_id = corpus.manifest.by_id();
    let embeddings: HashMap<&str, Vec<f64>> = needed
        .into_par_iter()
        .map(|id| {
            let rec = by_id[id];
            Ok((id, embed_waveform(pipeline, &corpus.audio(rec)?, vad)?))
        })
        .collect::<Result<_>>()?;
    trials
        .iter()
        .map(|t| {
            let e = &embeddings[resolve(&t.enroll)?];
            let s = &embeddings[resolve(&t.test)?];
            Ok(ScoredTrial {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                score: cosine(e, s),
            })
        })
        .collect()
}

pub fn score_set(trials: &[Trial], scores: &[ScoredTrial]) -> Result<ScoreSet> {
    if trials.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "{} trials but {} scores",
            trials.len(),
            scores.len()
        )));
    }
    ScoreSet::from_labeled(trials.iter().zip(scores).map(|(t, s)| (s.score, t.target)))
}

/// Scores, then summarizes as a report row.
pub fn evaluate(
    pipeline: &Pipeline<'_>,
    corpus: &Corpus,
    trials: &[Trial],
    condition: Condition,
    cfg: &EvalConfig,
    system: &str,
    checkpoint: &str,
) -> Result<(Vec<ScoredTrial>, ReportEntry)> {
    let scored = score_trials(pipeline, corpus, trials, condition, cfg.vad)?;
    let set = score_set(trials, &scored)?;
    let entry = ReportEntry {
        system: system.to_string(),
        condition,
        eer: eer(&set),
        min_dcf: min_dcf(&set, cfg.p_target)?,
        targets: set.targets().len(),
        nontargets: set.nontargets().len(),
        checkpoint: checkpoint.to_string(),
    };
    Ok((scored, entry))
}
