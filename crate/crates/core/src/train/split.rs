use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Interaction;
use crate::error::{ensure, Error, Result};

/// Minimum liked and disliked tracks per user for per-user splitting.
pub const MIN_PER_LABEL: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Each user's liked and disliked tracks are split independently.
    PerUser,
    /// Whole users are assigned to one split.
    DisjointUsers,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "per_user" => Ok(SplitMode::PerUser),
            "disjoint_users" => Ok(SplitMode::DisjointUsers),
            other => Err(Error::Parse(format!(
                "unknown split mode `{other}` (per_user | disjoint_users)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub mode: SplitMode,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(mode: SplitMode, seed: u64) -> Self {
        Self {
            ratios: [0.6, 0.2, 0.2],
            mode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.ratios.iter().all(|r| *r >= 0.0) && (self.ratios.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
            Contract,
            "split ratios {:?} must be non-negative and sum to 1",
            self.ratios
        );
        Ok(())
    }

    /// Train/val/test sizes for `n` items; the test split takes the remainder.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let train = ((n as f64 * self.ratios[0]).round() as usize).min(n);
        let val = ((n as f64 * self.ratios[1]).round() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

impl Splits {
    pub fn parts(&self) -> [&[Interaction]; 3] {
        [&self.train, &self.val, &self.test]
    }

    fn push(&mut self, which: usize, rows: impl IntoIterator<Item = Interaction>) {
        let dst = match which {
            0 => &mut self.train,
            1 => &mut self.val,
            _ => &mut self.test,
        };
        dst.extend(rows);
    }
}

/// Partitions the interactions; every row with the same (user, track, label)
/// lands in the same split.
pub fn split_dataset(interactions: &[Interaction], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // user → label → track → rows, all sorted so the shuffle is reproducible
    type Strata = BTreeMap<String, [BTreeMap<String, Vec<Interaction>>; 2]>;
    let mut strata: Strata = BTreeMap::new();
    for r in interactions {
        strata.entry(r.user.clone()).or_default()[r.liked as usize]
            .entry(r.track.clone())
            .or_default()
            .push(r.clone());
    }
    let mut out = Splits::default();
    match spec.mode {
        SplitMode::PerUser => {
            let short: Vec<String> = strata
                .iter()
                .filter(|(_, s)| s[0].len() < MIN_PER_LABEL || s[1].len() < MIN_PER_LABEL)
                .map(|(u, s)| format!("{u} ({} liked, {} disliked)", s[1].len(), s[0].len()))
                .collect();
            if !short.is_empty() {
                return Err(Error::Ingestion(format!(
                    "users below the {MIN_PER_LABEL} liked / {MIN_PER_LABEL} disliked floor: {}",
                    short.join(", ")
                )));
            }
            for by_label in strata.into_values() {
                for tracks in by_label.into_iter().rev() {
                    let mut groups: Vec<Vec<Interaction>> = tracks.into_values().collect();
                    groups.shuffle(&mut rng);
                    assign(&mut out, groups, spec);
                }
            }
        }
        SplitMode::DisjointUsers => {
            let mut users: Vec<Vec<Interaction>> = strata
                .into_values()
                .map(|[dis, liked]| liked.into_values().chain(dis.into_values()).flatten().collect())
                .collect();
            users.shuffle(&mut rng);
            assign(&mut out, users, spec);
        }
    }
    Ok(out)
}

fn assign(out: &mut Splits, groups: Vec<Vec<Interaction>>, spec: &SplitSpec) {
    let counts = spec.counts(groups.len());
    let mut it = groups.into_iter();
    for (which, &n) in counts.iter().enumerate() {
        for g in it.by_ref().take(n) {
            out.push(which, g);
        }
    }
}
