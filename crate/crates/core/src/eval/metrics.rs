use crate::error::{Error, Result};

/// Target and nontarget scores of a trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    targets: Vec<f64>,
    nontargets: Vec<f64>,
}

impl ScoreSet {
    pub fn new(targets: Vec<f64>, nontargets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() || nontargets.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "need at least one target and one nontarget score, got {} and {}",
                targets.len(),
                nontargets.len()
            )));
        }
        if targets.iter().chain(&nontargets).any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(Self {
            targets,
            nontargets,
        })
    }

    pub fn from_labeled(scores: impl IntoIterator<Item = (f64, bool)>) -> Result<Self> {
        let (t, n): (Vec<_>, Vec<_>) = scores.into_iter().partition(|&(_, target)| target);
        Self::new(
            t.into_iter().map(|(s, _)| s).collect(),
            n.into_iter().map(|(s, _)| s).collect(),
        )
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn nontargets(&self) -> &[f64] {
        &self.nontargets
    }

    /// `(P_miss, P_fa)` at every distinct threshold, from accept-all to
    /// reject-all. A trial is accepted when its score exceeds the threshold;
    /// thresholds sit between adjacent distinct scores.
    pub fn operating_points(&self) -> Vec<(f64, f64)> {
        let mut all: Vec<(f64, bool)> = self
            .targets
            .iter()
            .map(|&s| (s, true))
            .chain(self.nontargets.iter().map(|&s| (s, false)))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let nt = self.targets.len() as f64;
        let nn = self.nontargets.len() as f64;
        let (mut misses, mut rejected_non) = (0usize, 0usize);
        let mut points = vec![(0.0, 1.0)];
        let mut i = 0;
        while i < all.len() {
            let v = all[i].0;
            while i < all.len() && all[i].0 == v {
                if all[i].1 {
                    misses += 1;
                } else {
                    rejected_non += 1;
                }
                i += 1;
            }
            points.push((
                misses as f64 / nt,
                (self.nontargets.len() - rejected_non) as f64 / nn,
            ));
        }
        points
    }
}

/// Crossing of the piecewise-linear miss/false-alarm curve.
pub fn eer_from_points(points: &[(f64, f64)]) -> f64 {
    for w in points.windows(2) {
        let (m0, f0) = w[0];
        let (m1, f1) = w[1];
        let d0 = f0 - m0;
        let d1 = f1 - m1;
        if d1 <= 0.0 {
            let t = d0 / (d0 - d1);
            return m0 + t * (m1 - m0);
        }
    }
    unreachable!("the reject-all point has P_fa = 0 <= P_miss")
}

pub fn eer(s: &ScoreSet) -> f64 {
    eer_from_points(&s.operating_points())
}

pub fn check_prior(p_target: f64) -> Result<()> {
    if p_target > 0.0 && p_target < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "target prior {p_target} outside (0, 1)"
        )))
    }
}

/// Normalized detection cost with unit miss and false-alarm costs.
pub fn normalized_dcf(p_miss: f64, p_fa: f64, p_target: f64) -> f64 {
    (p_target * p_miss + (1.0 - p_target) * p_fa) / p_target.min(1.0 - p_target)
}

pub fn min_dcf_from_points(points: &[(f64, f64)], p_target: f64) -> f64 {
    points
        .iter()
        .map(|&(m, f)| normalized_dcf(m, f, p_target))
        .fold(f64::INFINITY, f64::min)
}

pub fn min_dcf(s: &ScoreSet, p_target: f64) -> Result<f64> {
    check_prior(p_target)?;
    Ok(min_dcf_from_points(&s.operating_points(), p_target))
}
