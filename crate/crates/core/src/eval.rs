use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub user: String,
    pub track: String,
    pub score: f64,
    pub liked: bool,
}

impl ScoredPair {
    pub fn new(user: impl Into<String>, track: impl Into<String>, score: f64, liked: bool) -> Self {
        Self {
            user: user.into(),
            track: track.into(),
            score,
            liked,
        }
    }
}

/// Scored pairs from text: `user track score label` or just `score label`
/// per line, tab or comma separated, label 1 for liked. A header line whose
/// first field is `user_id` or `score` is skipped.
pub fn parse_scores(text: &str) -> Result<Vec<ScoredPair>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(['\t', ',']).map(str::trim).collect();
        if i == 0 && (f[0] == "user_id" || f[0] == "score") {
            continue;
        }
        let n = i + 1;
        let (user, track, score, label) = match f.as_slice() {
            [u, t, s, l] => (*u, *t, *s, *l),
            [s, l] => ("", "", *s, *l),
            _ => return Err(Error::Parse(format!("line {n}: expected 2 or 4 fields, got {}", f.len()))),
        };
        let score: f64 = score
            .parse()
            .map_err(|_| Error::Parse(format!("line {n}: bad score `{score}`")))?;
        let liked = match label {
            "1" => true,
            "0" => false,
            other => return Err(Error::Parse(format!("line {n}: label must be 0 or 1, got `{other}`"))),
        };
        out.push(ScoredPair::new(user, track, score, liked));
    }
    Ok(out)
}

fn check_finite(pairs: &[ScoredPair]) -> Result<()> {
    if let Some(p) = pairs.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::Contract(format!(
            "score for ({}, {}) is not finite",
            p.user, p.track
        )));
    }
    Ok(())
}

/// Mann–Whitney AUC pooled over all pairs, ties counted as one half.
pub fn auc(pairs: &[ScoredPair]) -> Result<f64> {
    check_finite(pairs)?;
    let n_pos = pairs.iter().filter(|p| p.liked).count() as u64;
    let n_neg = pairs.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} liked and {n_neg} disliked"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = pairs.iter().map(|p| (p.score, p.liked)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the U statistic, kept integral so ties stay exact
    let mut u2: u64 = 0;
    let mut negs_below: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let pos_here = sorted[i..j].iter().filter(|x| x.1).count() as u64;
        let neg_here = (j - i) as u64 - pos_here;
        u2 += pos_here * (2 * negs_below + neg_here);
        negs_below += neg_here;
        i = j;
    }
    Ok(u2 as f64 / 2.0 / (n_pos * n_neg) as f64)
}

/// Fraction of pairs scored above `threshold` that are liked.
pub fn precision(pairs: &[ScoredPair], threshold: f64) -> Result<f64> {
    check_finite(pairs)?;
    let predicted: Vec<&ScoredPair> = pairs.iter().filter(|p| p.score > threshold).collect();
    if predicted.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "no pair scores above {threshold}"
        )));
    }
    Ok(predicted.iter().filter(|p| p.liked).count() as f64 / predicted.len() as f64)
}

/// Fraction of users with at least one held-out positive in their first `n`
/// recommendations. Users without held-out positives are skipped.
pub fn hit_rate_at_n(
    recommendations: &BTreeMap<String, Vec<String>>,
    heldout: &BTreeMap<String, BTreeSet<String>>,
    n: usize,
) -> Result<f64> {
    ensure!(n >= 1, Contract, "hit rate needs n >= 1");
    let mut users = 0usize;
    let mut hits = 0usize;
    for (user, positives) in heldout {
        if positives.is_empty() {
            log::warn!("user {user} has no held-out positives; excluded from hit rate");
            continue;
        }
        users += 1;
        let list = recommendations.get(user).map(Vec::as_slice).unwrap_or_default();
        if list.iter().take(n).any(|t| positives.contains(t)) {
            hits += 1;
        }
    }
    if users == 0 {
        return Err(Error::UndefinedMetric("no user has held-out positives".into()));
    }
    Ok(hits as f64 / users as f64)
}

/// Metrics of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub pairs: usize,
    pub liked: usize,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub threshold: f64,
}

impl EvalReport {
    /// Undefined metrics are reported as absent rather than failing the report.
    pub fn compute(split: &str, pairs: &[ScoredPair], threshold: f64) -> Result<Self> {
        check_finite(pairs)?;
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            split: split.to_string(),
            pairs: pairs.len(),
            liked: pairs.iter().filter(|p| p.liked).count(),
            auc: defined(auc(pairs))?,
            precision: defined(precision(pairs, threshold))?,
            threshold,
        })
    }

    pub fn to_text(&self) -> String {
        let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        format!(
            "{}: {} pairs ({} liked), AUC {}, precision@{} {}\n",
            self.split,
            self.pairs,
            self.liked,
            show(self.auc),
            self.threshold,
            show(self.precision)
        )
    }

    /// `key = value` lines prefixed with `[split]`.
    pub fn to_key_values(&self) -> String {
        let show = |v: Option<f64>| v.map_or("nan".to_string(), |v| v.to_string());
        let mut s = format!("[{}]\n", self.split);
        let _ = writeln!(s, "pairs = {}", self.pairs);
        let _ = writeln!(s, "liked = {}", self.liked);
        let _ = writeln!(s, "auc = {}", show(self.auc));
        let _ = writeln!(s, "precision = {}", show(self.precision));
        let _ = writeln!(s, "threshold = {}", self.threshold);
        s
    }
}
