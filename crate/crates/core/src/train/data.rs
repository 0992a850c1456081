use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// One user/track event from the interaction manifest.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interaction {
    pub user: String,
    pub track: String,
    pub album: String,
    pub artist: String,
    pub liked: bool,
    pub timestamp: i64,
}

/// Splits a manifest line on tabs, or on commas when there is no tab.
pub(crate) fn fields(line: &str) -> Vec<&str> {
    let sep = if line.contains('\t') { '\t' } else { ',' };
    line.split(sep).map(str::trim).collect()
}

/// Non-empty, non-comment lines with their 1-based numbers. A first record
/// whose leading field equals `header` is skipped.
pub(crate) fn records<'a>(text: &'a str, header: &'a str) -> impl Iterator<Item = (usize, &'a str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .enumerate()
        .filter(move |(k, (_, l))| !(*k == 0 && fields(l)[0] == header))
        .map(|(_, r)| r)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_interactions(text: &str) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (n, line) in records(text, "user_id") {
        let f = fields(line);
        ensure!(f.len() == 6, Parse, "line {n}: expected 6 fields, got {}", f.len());
        ensure!(
            f[..4].iter().all(|s| !s.is_empty()),
            Parse,
            "line {n}: empty id"
        );
        let liked = match f[4] {
            "1" => true,
            "0" => false,
            other => return Err(Error::Parse(format!("line {n}: label `{other}` is not 0 or 1"))),
        };
        let timestamp = f[5]
            .parse()
            .map_err(|_| Error::Parse(format!("line {n}: bad timestamp `{}`", f[5])))?;
        out.push(Interaction {
            user: f[0].into(),
            track: f[1].into(),
            album: f[2].into(),
            artist: f[3].into(),
            liked,
            timestamp,
        });
    }
    Ok(out)
}

pub fn format_interactions(rows: &[Interaction]) -> String {
    let mut s = String::from("user_id\ttrack_id\talbum_id\tartist_id\tlabel\ttimestamp\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.user, r.track, r.album, r.artist, r.liked as u8, r.timestamp
        );
    }
    s
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    parse_interactions(&read_text(path.as_ref())?)
}

/// user → demographic feature ids.
pub type Demographics = BTreeMap<String, Vec<String>>;

/// Rows of `user_id` followed by any number of feature ids.
pub fn parse_demographics(text: &str) -> Result<Demographics> {
    let mut out = Demographics::new();
    for (n, line) in records(text, "user_id") {
        let f = fields(line);
        ensure!(!f[0].is_empty(), Parse, "line {n}: empty user id");
        let feats = f[1..]
            .iter()
            .flat_map(|s| s.split_whitespace())
            .map(String::from)
            .collect();
        ensure!(
            out.insert(f[0].to_string(), feats).is_none(),
            Parse,
            "line {n}: user `{}` listed twice",
            f[0]
        );
    }
    Ok(out)
}

pub fn format_demographics(demo: &Demographics) -> String {
    let mut s = String::from("user_id\tfeatures\n");
    for (user, feats) in demo {
        let _ = writeln!(s, "{user}\t{}", feats.join(" "));
    }
    s
}

pub fn load_demographics(path: impl AsRef<Path>) -> Result<Demographics> {
    parse_demographics(&read_text(path.as_ref())?)
}

/// Distinct users in first-seen order is not needed anywhere, so sorted.
pub fn users_of(rows: &[Interaction]) -> Vec<String> {
    rows.iter()
        .map(|r| r.user.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn tracks_of(rows: &[Interaction]) -> Vec<String> {
    rows.iter()
        .map(|r| r.track.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
