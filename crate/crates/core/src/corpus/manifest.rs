use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    TrainClean,
    TrainCleanAug,
    TrainNoisy,
    TrainNoisyAug,
    TestClean,
    TestNoisy,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::TrainClean,
        Split::TrainCleanAug,
        Split::TrainNoisy,
        Split::TrainNoisyAug,
        Split::TestClean,
        Split::TestNoisy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainClean => "train_clean",
            Split::TrainCleanAug => "train_clean_aug",
            Split::TrainNoisy => "train_noisy",
            Split::TrainNoisyAug => "train_noisy_aug",
            Split::TestClean => "test_clean",
            Split::TestNoisy => "test_noisy",
        }
    }

    pub fn is_train(self) -> bool {
        !matches!(self, Split::TestClean | Split::TestNoisy)
    }

    /// Splits whose records carry an SNR.
    pub fn is_mixed(self) -> bool {
        !matches!(self, Split::TrainClean | Split::TestClean)
    }

    /// Training splits that feed the enhancer as the noisy side of a pair.
    pub fn is_noisy_train(self) -> bool {
        matches!(self, Split::TrainNoisy | Split::TrainNoisyAug)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::format("manifest", format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: u32,
    pub split: Split,
    pub snr_db: Option<f64>,
    pub paired_clean_id: Option<String>,
    /// Relative to the manifest's directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub speaker_count: u32,
    pub config_hash: String,
}

const HEADER: &str = "# nvl-manifest v1";

fn valid_field(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\t', '\n', '\r'])
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "{HEADER}\n# speakers={}\n# config_hash={}\n",
            self.speaker_count, self.config_hash
        );
        for r in &self.records {
            let snr = r.snr_db.map_or_else(|| "-".to_string(), |v| format!("{v:?}"));
            let paired = r.paired_clean_id.as_deref().unwrap_or("-");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.utt_id, r.speaker_id, r.split, snr, paired, r.path
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        const WHAT: &str = "manifest";
        let mut records = Vec::new();
        let mut speaker_count = None;
        let mut config_hash = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                if let Some(v) = meta.strip_prefix("speakers=") {
                    speaker_count = Some(v.parse::<u32>().map_err(|e| {
                        Error::format(WHAT, format!("line {}: speakers: {e}", lineno + 1))
                    })?);
                } else if let Some(v) = meta.strip_prefix("config_hash=") {
                    config_hash = Some(v.to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let err = |msg: String| Error::format(WHAT, format!("line {}: {msg}", lineno + 1));
            let [utt_id, speaker, split, snr, paired, path] = fields[..] else {
                return Err(err(format!("expected 6 fields, got {}", fields.len())));
            };
            if !valid_field(utt_id) || !valid_field(path) {
                return Err(err("empty utt_id or path".into()));
            }
            let snr_db = match snr {
                "-" => None,
                v => {
                    let x: f64 = v.parse().map_err(|e| err(format!("snr {v:?}: {e}")))?;
                    if !x.is_finite() {
                        return Err(err(format!("snr {v:?} is not finite")));
                    }
                    Some(x)
                }
            };
            records.push(UtteranceRecord {
                utt_id: utt_id.to_string(),
                speaker_id: speaker
                    .parse()
                    .map_err(|e| err(format!("speaker {speaker:?}: {e}")))?,
                split: split.parse().map_err(|e: Error| err(e.to_string()))?,
                snr_db,
                paired_clean_id: (paired != "-").then(|| paired.to_string()),
                path: path.to_string(),
            });
        }
        let speaker_count = match speaker_count {
            Some(n) => n,
            None => records
                .iter()
                .map(|r| r.speaker_id)
                .collect::<BTreeSet<_>>()
                .len() as u32,
        };
        Ok(Self {
            records,
            speaker_count,
            config_hash: config_hash.unwrap_or_default(),
        })
    }

    /// Checks the structural invariants; `min_train_utts` is the per-speaker
    /// minimum for training speakers.
    pub fn validate(&self, min_train_utts: usize) -> Result<()> {
        let mut problems = Vec::new();
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.utt_id.as_str()) {
                problems.push(format!("duplicate utt_id {}", r.utt_id));
            }
        }
        let by_id = self.by_id();
        let speakers: BTreeSet<u32> = self.records.iter().map(|r| r.speaker_id).collect();
        if speakers.len() as u32 != self.speaker_count
            || speakers.iter().enumerate().any(|(i, &s)| i as u32 != s)
        {
            problems.push(format!(
                "speaker ids must be dense 0..{}",
                self.speaker_count
            ));
        }
        let train: HashSet<u32> = self
            .records
            .iter()
            .filter(|r| r.split.is_train())
            .map(|r| r.speaker_id)
            .collect();
        let test: HashSet<u32> = self
            .records
            .iter()
            .filter(|r| !r.split.is_train())
            .map(|r| r.speaker_id)
            .collect();
        if let Some(s) = train.intersection(&test).next() {
            problems.push(format!("speaker {s} appears in both train and test"));
        }
        for r in &self.records {
            if r.split.is_mixed() != r.snr_db.is_some() {
                problems.push(format!("{}: snr presence does not match split {}", r.utt_id, r.split));
            }
            if r.split.is_noisy_train() && r.paired_clean_id.is_none() {
                problems.push(format!("{}: noisy training utterance without a clean pair", r.utt_id));
            }
            if let Some(p) = &r.paired_clean_id {
                match by_id.get(p.as_str()) {
                    None => problems.push(format!("{}: paired id {p} not in manifest", r.utt_id)),
                    Some(c) if c.speaker_id != r.speaker_id => {
                        problems.push(format!("{}: paired with another speaker", r.utt_id))
                    }
                    _ => {}
                }
            }
        }
        let mut per_speaker: HashMap<u32, usize> = HashMap::new();
        for r in self.records_in(Split::TrainClean) {
            *per_speaker.entry(r.speaker_id).or_default() += 1;
        }
        for (&s, &n) in &per_speaker {
            if n < min_train_utts {
                problems.push(format!(
                    "training speaker {s} has {n} utterances, fewer than {min_train_utts}"
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            problems.sort();
            Err(Error::validation("manifest", problems.join("; ")))
        }
    }

    pub fn by_id(&self) -> HashMap<&str, &UtteranceRecord> {
        self.records.iter().map(|r| (r.utt_id.as_str(), r)).collect()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records_in(split).count()
    }

    /// Training speaker ids in ascending order.
    pub fn train_speakers(&self) -> Vec<u32> {
        self.records
            .iter()
            .filter(|r| r.split.is_train())
            .map(|r| r.speaker_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn test_speakers(&self) -> Vec<u32> {
        self.records
            .iter()
            .filter(|r| !r.split.is_train())
            .map(|r| r.speaker_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}
