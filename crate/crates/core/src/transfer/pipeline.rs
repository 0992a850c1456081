use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pca::Pca;
use super::svm::{SvmModel, DEFAULT_C, DEFAULT_GAMMA};
use crate::error::{ensure, Error, Result};
use crate::index::EmbeddingStore;
use crate::train::{fields, read_text, records};

pub const DEFAULT_PCA_DIM: usize = 128;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

/// `track_id v1 v2 …` per line; every vector must have the same length.
pub fn parse_features(text: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (n, line) in records(text, "track_id") {
        let mut parts = line.split(|c: char| c == '\t' || c == ',' || c.is_whitespace()).filter(|s| !s.is_empty());
        let id = parts.next().expect("record lines are non-empty").to_string();
        let values = parts
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Parse(format!("line {n}: bad feature value `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        ensure!(!values.is_empty(), Parse, "line {n}: `{id}` has no feature values");
        match dim {
            None => dim = Some(values.len()),
            Some(d) => ensure!(values.len() == d, Parse, "line {n}: {} values, earlier lines have {d}", values.len()),
        }
        ensure!(out.insert(id.clone(), values).is_none(), Parse, "line {n}: duplicate track `{id}`");
    }
    Ok(out)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<f64>>> {
    parse_features(&read_text(path.as_ref())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Partition::Train),
            "val" | "valid" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Parse(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenreEntry {
    pub track: String,
    pub genre: String,
    pub partition: Option<Partition>,
}

/// `track_id, genre[, split]` rows. Either every row has a split tag or none does.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenreManifest {
    entries: Vec<GenreEntry>,
}

impl GenreManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashMap::new();
        for (n, line) in records(text, "track_id") {
            let f = fields(line);
            ensure!(f.len() == 2 || f.len() == 3, Parse, "line {n}: expected 2 or 3 fields, got {}", f.len());
            ensure!(!f[0].is_empty() && !f[1].is_empty(), Parse, "line {n}: empty track or genre");
            let partition = match f.get(2) {
                Some(tag) => Some(tag.parse::<Partition>().map_err(|e| Error::Parse(format!("line {n}: {e}")))?),
                None => None,
            };
            if let Some(prev) = seen.insert(f[0].to_string(), n) {
                return Err(Error::Parse(format!("line {n}: track `{}` already listed on line {prev}", f[0])));
            }
            entries.push(GenreEntry {
                track: f[0].to_string(),
                genre: f[1].to_string(),
                partition,
            });
        }
        ensure!(!entries.is_empty(), Parse, "genre manifest is empty");
        let tagged = entries.iter().filter(|e| e.partition.is_some()).count();
        ensure!(
            tagged == 0 || tagged == entries.len(),
            Parse,
            "{tagged} of {} rows carry a split tag; tag all or none",
            entries.len()
        );
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_text(path.as_ref())?)
    }

    pub fn entries(&self) -> &[GenreEntry] {
        &self.entries
    }

    pub fn is_tagged(&self) -> bool {
        self.entries[0].partition.is_some()
    }

    /// Sorted distinct genre labels; a label's class id is its position.
    pub fn genres(&self) -> Vec<String> {
        let mut g: Vec<String> = self.entries.iter().map(|e| e.genre.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Tagged manifests keep their tags; untagged ones get a per-genre
    /// shuffled `train_fraction` train / rest test split.
    pub fn partitions(&self, train_fraction: f64, seed: u64) -> Result<BTreeMap<Partition, Vec<GenreEntry>>> {
        let mut out: BTreeMap<Partition, Vec<GenreEntry>> = BTreeMap::new();
        if self.is_tagged() {
            for e in &self.entries {
                out.entry(e.partition.expect("tagged")).or_default().push(e.clone());
            }
            return Ok(out);
        }
        ensure!(
            train_fraction > 0.0 && train_fraction < 1.0,
            Contract,
            "train fraction must be in (0, 1), got {train_fraction}"
        );
        let mut by_genre: BTreeMap<&str, Vec<&GenreEntry>> = BTreeMap::new();
        for e in &self.entries {
            by_genre.entry(&e.genre).or_default().push(e);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for rows in by_genre.values_mut() {
            rows.shuffle(&mut rng);
            let n_train = (rows.len() as f64 * train_fraction).round() as usize;
            for (i, e) in rows.iter().enumerate() {
                let p = if i < n_train { Partition::Train } else { Partition::Test };
                out.entry(p).or_default().push(GenreEntry {
                    partition: Some(p),
                    ..(*e).clone()
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenreConfig {
    pub pca_dim: usize,
    pub gamma: f64,
    pub c: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for GenreConfig {
    fn default() -> Self {
        Self {
            pca_dim: DEFAULT_PCA_DIM,
            gamma: DEFAULT_GAMMA,
            c: DEFAULT_C,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed: 0,
        }
    }
}

/// Per-dimension standardisation with training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), Contract, "no rows to standardise");
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
        }
        // constant dimensions are left unscaled
        let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Standardise, project and classify.
#[derive(Clone, Debug, PartialEq)]
pub struct GenreClassifier {
    scaler: Standardizer,
    pca: Pca,
    svm: SvmModel,
}

impl GenreClassifier {
    pub fn fit(x: &[Vec<f64>], labels: &[usize], cfg: &GenreConfig) -> Result<Self> {
        let scaler = Standardizer::fit(x)?;
        let scaled: Vec<Vec<f64>> = x.iter().map(|r| scaler.apply(r)).collect();
        let dim = cfg.pca_dim.min(scaled[0].len()).min(scaled.len());
        if dim < cfg.pca_dim {
            log::warn!(
                "{} samples of {} dims: PCA keeps {dim} components instead of {}",
                scaled.len(),
                scaled[0].len(),
                cfg.pca_dim
            );
        }
        let pca = Pca::fit(&scaled, dim)?;
        let z = scaled.iter().map(|r| pca.apply(r)).collect::<Result<Vec<_>>>()?;
        let svm = SvmModel::fit(&z, labels, cfg.gamma, cfg.c)?;
        Ok(Self { scaler, pca, svm })
    }

    pub fn pca(&self) -> &Pca {
        &self.pca
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        self.svm.predict(&self.pca.apply(&self.scaler.apply(x))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub name: String,
    pub feature_dim: usize,
    pub test_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// `(genre, correct, total)` on the test partition.
    pub per_class: Vec<(String, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenreReport {
    pub counts: BTreeMap<Partition, usize>,
    pub conditions: Vec<ConditionReport>,
}

impl GenreReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let count = |p| self.counts.get(&p).copied().unwrap_or(0);
        let _ = writeln!(
            s,
            "tracks\ttrain={}\tval={}\ttest={}",
            count(Partition::Train),
            count(Partition::Val),
            count(Partition::Test)
        );
        for c in &self.conditions {
            let _ = write!(s, "condition\t{}\tdim={}\ttest_accuracy={:.4}", c.name, c.feature_dim, c.test_accuracy);
            if let Some(v) = c.val_accuracy {
                let _ = write!(s, "\tval_accuracy={v:.4}");
            }
            s.push('\n');
            for (g, ok, n) in &c.per_class {
                let _ = writeln!(s, "class\t{}\t{g}\t{ok}/{n}\t{:.4}", c.name, *ok as f64 / (*n).max(1) as f64);
            }
        }
        s
    }
}

fn assemble(
    rows: &[GenreEntry],
    baseline: &BTreeMap<String, Vec<f64>>,
    ae: Option<&EmbeddingStore>,
) -> Result<Vec<Vec<f64>>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(rows.len());
    for e in rows {
        let Some(base) = baseline.get(&e.track) else {
            missing.push(format!("{} (baseline)", e.track));
            continue;
        };
        let mut v = base.clone();
        if let Some(store) = ae {
            match store.vector(&e.track) {
                Some(a) => v.extend(a.iter().map(|&x| x as f64)),
                None => {
                    missing.push(format!("{} (audio embedding)", e.track));
                    continue;
                }
            }
        }
        out.push(v);
    }
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(10).map(String::as_str).collect();
        return Err(Error::Ingestion(format!(
            "{} tracks lack features: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 10 { ", …" } else { "" }
        )));
    }
    Ok(out)
}

fn accuracy(model: &GenreClassifier, x: &[Vec<f64>], y: &[usize]) -> Result<(usize, Vec<(usize, usize)>)> {
    let n_classes = y.iter().max().map_or(0, |m| m + 1);
    let mut per = vec![(0usize, 0usize); n_classes];
    let mut correct = 0;
    for (xi, &yi) in x.iter().zip(y) {
        let hit = model.predict(xi)? == yi;
        correct += hit as usize;
        per[yi].0 += hit as usize;
        per[yi].1 += 1;
    }
    Ok((correct, per))
}

/// Fits and scores the baseline condition, plus baseline⊕AE when a store is given.
pub fn genre_pipeline(
    manifest: &GenreManifest,
    baseline: &BTreeMap<String, Vec<f64>>,
    ae: Option<&EmbeddingStore>,
    cfg: &GenreConfig,
) -> Result<GenreReport> {
    let genres = manifest.genres();
    let class: HashMap<&str, usize> = genres.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let parts = manifest.partitions(cfg.train_fraction, cfg.seed)?;
    let get = |p| parts.get(&p).map(Vec::as_slice).unwrap_or(&[]);
    let (train, val, test) = (get(Partition::Train), get(Partition::Val), get(Partition::Test));
    ensure!(!train.is_empty() && !test.is_empty(), Contract, "need non-empty train and test partitions");
    let labels = |rows: &[GenreEntry]| rows.iter().map(|e| class[e.genre.as_str()]).collect::<Vec<usize>>();
    let (y_train, y_val, y_test) = (labels(train), labels(val), labels(test));

    let mut conditions = Vec::new();
    let mut runs: Vec<(&str, Option<&EmbeddingStore>)> = vec![("baseline", None)];
    if let Some(store) = ae {
        runs.push(("baseline+ae", Some(store)));
    }
    for (name, store) in runs {
        let x_train = assemble(train, baseline, store)?;
        let x_val = assemble(val, baseline, store)?;
        let x_test = assemble(test, baseline, store)?;
        let model = GenreClassifier::fit(&x_train, &y_train, cfg)?;
        let (ok, per) = accuracy(&model, &x_test, &y_test)?;
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(accuracy(&model, &x_val, &y_val)?.0 as f64 / val.len() as f64)
        };
        conditions.push(ConditionReport {
            name: name.to_string(),
            feature_dim: x_train[0].len(),
            test_accuracy: ok as f64 / test.len() as f64,
            val_accuracy,
            per_class: genres
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let (c, n) = per.get(i).copied().unwrap_or((0, 0));
                    (g.clone(), c, n)
                })
                .collect(),
        });
    }
    Ok(GenreReport {
        counts: parts.iter().map(|(p, v)| (*p, v.len())).collect(),
        conditions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_parse_and_reject_ragged_rows() {
        let f = parse_features("track_id\tf0\tf1\na\t1\t2\nb 3 4\n").unwrap();
        assert_eq!(f["b"], vec![3.0, 4.0]);
        assert!(parse_features("a 1 2\nb 3\n").is_err());
        assert!(parse_features("a 1 x\n").is_err());
        assert!(parse_features("a 1\na 2\n").is_err());
    }

    #[test]
    fn untagged_manifest_splits_seven_to_three_per_genre() {
        let mut text = String::from("track_id\tgenre\n");
        for g in ["rock", "jazz"] {
            for i in 0..1000 {
                text.push_str(&format!("{g}{i}\t{g}\n"));
            }
        }
        let m = GenreManifest::parse(&text).unwrap();
        let p = m.partitions(0.7, 1).unwrap();
        for g in ["rock", "jazz"] {
            assert_eq!(p[&Partition::Train].iter().filter(|e| e.genre == g).count(), 700);
            assert_eq!(p[&Partition::Test].iter().filter(|e| e.genre == g).count(), 300);
        }
        assert_eq!(p, m.partitions(0.7, 1).unwrap());
    }

    #[test]
    fn mixed_tagging_is_rejected() {
        assert!(GenreManifest::parse("a\tx\ttrain\nb\tx\n").is_err());
        assert!(GenreManifest::parse("a\tx\tholdout\n").is_err());
    }

    #[test]
    fn missing_features_are_an_ingestion_error() {
        let m = GenreManifest::parse("a\tx\ttrain\nb\ty\ttest\n").unwrap();
        let f = parse_features("a 1 2\n").unwrap();
        let err = genre_pipeline(&m, &f, None, &GenreConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Ingestion(ref s) if s.contains("b (baseline)")));
    }
}
