use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Manifest, Split};
use crate::error::{Error, Result};
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

fn label(target: bool) -> &'static str {
    if target {
        "target"
    } else {
        "nontarget"
    }
}

/// Balanced target/nontarget trials over the clean test utterances.
/// Each test speaker contributes `trials_per_speaker / 2` target trials and as
/// many nontarget trials with it as enrollment side. No utterance pair
/// appears twice in either order.
pub fn build_trials(manifest: &Manifest, trials_per_speaker: usize, base_seed: u64) -> Result<Vec<Trial>> {
    let mut by_speaker: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for r in manifest.records_in(Split::TestClean) {
        by_speaker.entry(r.speaker_id).or_default().push(&r.utt_id);
    }
    if by_speaker.len() < 2 {
        return Err(Error::validation(
            "trials",
            format!("need at least 2 test speakers, found {}", by_speaker.len()),
        ));
    }
    let half = trials_per_speaker / 2;
    if half == 0 {
        return Err(Error::validation("eval.trials_per_speaker", "must be at least 2"));
    }
    for (s, utts) in &by_speaker {
        let pairs = utts.len() * utts.len().saturating_sub(1) / 2;
        if pairs < half {
            return Err(Error::validation(
                "eval.trials_per_speaker",
                format!(
                    "speaker {s} has {} utterances, giving {pairs} target pairs; {half} needed",
                    utts.len()
                ),
            ));
        }
    }
    let speakers: Vec<u32> = by_speaker.keys().copied().collect();
    let mut rng = seed::rng(base_seed, &[tag::TRIALS]);
    let key = |a: &str, b: &str| -> (String, String) {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    };
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut trials = Vec::with_capacity(half * 2 * speakers.len());
    for (si, &s) in speakers.iter().enumerate() {
        let utts = &by_speaker[&s];
        let mut pairs: Vec<(usize, usize)> = (0..utts.len())
            .flat_map(|i| (i + 1..utts.len()).map(move |j| (i, j)))
            .collect();
        pairs.shuffle(&mut rng);
        for &(i, j) in pairs.iter().take(half) {
            let (a, b) = if rng.gen_bool(0.5) { (i, j) } else { (j, i) };
            seen.insert(key(utts[a], utts[b]));
            trials.push(Trial {
                enroll: utts[a].to_string(),
                test: utts[b].to_string(),
                target: true,
            });
        }
        let others: Vec<u32> = speakers
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != si)
            .map(|(_, &o)| o)
            .collect();
        let available: usize = others.iter().map(|o| by_speaker[o].len()).sum::<usize>() * utts.len();
        let mut made = 0;
        let mut attempts = 0;
        while made < half {
            attempts += 1;
            if attempts > 1000 * half.max(available) {
                return Err(Error::validation(
                    "eval.trials_per_speaker",
                    format!("cannot draw {half} distinct nontarget trials for speaker {s}"),
                ));
            }
            let enroll = utts[rng.gen_range(0..utts.len())];
            let other = &by_speaker[&others[rng.gen_range(0..others.len())]];
            let test = other[rng.gen_range(0..other.len())];
            if seen.insert(key(enroll, test)) {
                trials.push(Trial {
                    enroll: enroll.to_string(),
                    test: test.to_string(),
                    target: false,
                });
                made += 1;
            }
        }
    }
    Ok(trials)
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.enroll, t.test, label(t.target)))
        .collect()
}

fn fields<'a>(line: &'a str, lineno: usize, what: &'static str) -> Result<[&'a str; 3]> {
    let parts: Vec<&str> = line.split('\t').collect();
    match parts[..] {
        [a, b, c] if !a.is_empty() && !b.is_empty() => Ok([a, b, c]),
        _ => Err(Error::format(
            what,
            format!("line {lineno}: expected 3 tab-separated fields"),
        )),
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    lines(text)
        .map(|(n, line)| {
            let [enroll, test, lab] = fields(line, n, "trials")?;
            let target = match lab {
                "target" => true,
                "nontarget" => false,
                other => {
                    return Err(Error::format(
                        "trials",
                        format!("line {n}: unknown label {other:?}"),
                    ))
                }
            };
            Ok(Trial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                target,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

pub fn format_scores(scores: &[ScoredTrial]) -> String {
    scores
        .iter()
        .map(|s| format!("{}\t{}\t{:?}\n", s.enroll, s.test, s.score))
        .collect()
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoredTrial>> {
    lines(text)
        .map(|(n, line)| {
            let [enroll, test, score] = fields(line, n, "scores")?;
            let score: f64 = score
                .parse()
                .map_err(|e| Error::format("scores", format!("line {n}: {e}")))?;
            if !score.is_finite() {
                return Err(Error::format("scores", format!("line {n}: non-finite score")));
            }
            Ok(ScoredTrial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                score,
            })
        })
        .collect()
}
