use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Clean,
    Noisy,
}

impl Condition {
    pub const ALL: [Condition; 2] = [Condition::Clean, Condition::Noisy];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Condition::Clean),
            "noisy" => Ok(Condition::Noisy),
            _ => Err(Error::InvalidArgument(format!("unknown condition {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub system: String,
    pub condition: Condition,
    /// Fraction in [0, 1].
    pub eer: f64,
    pub min_dcf: f64,
    pub targets: usize,
    pub nontargets: usize,
    /// Content hash of the evaluated checkpoint(s).
    pub checkpoint: String,
}

/// Evaluation results plus provenance key/value pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<ReportEntry>,
}

const HEADER: &str = "# nvl evaluation report";
const COLUMNS: &str = "system\tcondition\teer_percent\tmin_dcf\ttargets\tnontargets\tcheckpoint";

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn find(&self, system: &str, condition: Condition) -> Option<&ReportEntry> {
        self.entries
            .iter()
            .find(|e| e.system == system && e.condition == condition)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for (k, v) in &self.meta {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(COLUMNS);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{}\t{}\t{}\n",
                e.system,
                e.condition,
                100.0 * e.eer,
                e.min_dcf,
                e.targets,
                e.nontargets,
                e.checkpoint
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |n: usize, m: String| Error::format("report", format!("line {n}: {m}"));
        let mut report = Report::new();
        let mut in_table = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !in_table {
                if line == COLUMNS {
                    in_table = true;
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| err(n, "expected key=value".into()))?;
                if k.is_empty() || k.contains('\t') {
                    return Err(err(n, "invalid key".into()));
                }
                report.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let [system, cond, eer, dcf, nt, nn, ckpt] = f[..] else {
                return Err(err(n, format!("expected 7 fields, got {}", f.len())));
            };
            let num = |s: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|e| err(n, format!("{s:?}: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(n, format!("{s:?} is not finite")))
                }
            };
            let count = |s: &str| -> Result<usize> { s.parse().map_err(|e| err(n, format!("{s:?}: {e}"))) };
            report.entries.push(ReportEntry {
                system: system.to_string(),
                condition: cond.parse().map_err(|e: Error| err(n, e.to_string()))?,
                eer: num(eer)? / 100.0,
                min_dcf: num(dcf)?,
                targets: count(nt)?,
                nontargets: count(nn)?,
                checkpoint: ckpt.to_string(),
            });
        }
        if !in_table {
            return Err(Error::format("report", "missing column header"));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut r = Report::new();
        r.set("backend", "cosine");
        r.set("p_target", 0.05);
        r.entries.push(ReportEntry {
            system: "d".into(),
            condition: Condition::Noisy,
            eer: 0.125,
            min_dcf: 0.5,
            targets: 100,
            nontargets: 100,
            checkpoint: "abc".into(),
        });
        let text = r.to_text();
        assert!(text.contains("d\tnoisy\t12.5000\t0.5000\t100\t100\tabc"));
        assert_eq!(Report::parse(&text).unwrap(), r);
        assert!(Report::parse("backend=cosine\n").is_err());
    }
}
