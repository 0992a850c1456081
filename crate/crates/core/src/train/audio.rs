use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::data::Interaction;
use super::optim::Nesterov;
use super::split::Splits;
use crate::audio_branch::{AudioModel, ExampleGroup, GroupInputs, VariantKind};
use crate::embedding::cosine;
use crate::error::{Error, Result};
use crate::eval::{auc, precision, ScoredPair};
use crate::frontend::{
    files_with_extension, load_log_mel, sample_segment, LogMelSegment, LogMelSpectrogram, CACHE_EXTENSION,
};
use crate::index::EmbeddingStore;
use crate::nd::ParamSet;

/// Cached log-mel spectrograms keyed by track id.
#[derive(Clone, Debug, Default)]
pub struct AudioLibrary {
    tracks: HashMap<String, LogMelSpectrogram>,
}

impl AudioLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, track: impl Into<String>, spec: LogMelSpectrogram) {
        self.tracks.insert(track.into(), spec);
    }

    pub fn get(&self, track: &str) -> Result<&LogMelSpectrogram> {
        self.tracks
            .get(track)
            .ok_or_else(|| Error::Ingestion(format!("no audio features for track `{track}`")))
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn track_ids(&self) -> BTreeSet<&str> {
        self.tracks.keys().map(String::as_str).collect()
    }

    /// Loads every `<track>.lmel` file of a feature directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let files = files_with_extension(dir.as_ref(), CACHE_EXTENSION)?;
        let specs = files
            .par_iter()
            .map(|(track, path)| Ok((track.clone(), load_log_mel(path)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(specs.into_iter().collect())
    }
}

impl FromIterator<(String, LogMelSpectrogram)> for AudioLibrary {
    fn from_iter<I: IntoIterator<Item = (String, LogMelSpectrogram)>>(iter: I) -> Self {
        Self {
            tracks: iter.into_iter().collect(),
        }
    }
}

/// FNV-1a, stable across runs and platforms.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Seed of the evaluation segment of a track; fixed across epochs.
pub fn eval_segment_seed(track: &str) -> u64 {
    stable_hash(track) ^ 0x5eed_e7a1
}

fn epoch_segment_seed(seed: u64, epoch: usize, track: &str) -> u64 {
    stable_hash(track) ^ seed.wrapping_mul(0x9e3779b97f4a7c15) ^ ((epoch as u64 + 1) << 32)
}

/// Audio embedding of every track, each from its evaluation segment.
pub fn embed_tracks<'a>(
    model: &AudioModel,
    tracks: impl IntoIterator<Item = &'a str>,
    audio: &AudioLibrary,
) -> Result<BTreeMap<String, Vec<f32>>> {
    let ctx = model.variant().context_duration;
    let tracks: Vec<&str> = tracks.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    tracks
        .par_iter()
        .map(|&t| {
            let seg = sample_segment(audio.get(t)?, ctx, eval_segment_seed(t))?;
            Ok((t.to_string(), model.embed(&seg)?.into_vec()))
        })
        .collect()
}

/// Scores every interaction as the cosine between the user's anchor and the
/// track's audio embedding.
pub fn score_interactions(
    model: &AudioModel,
    rows: &[Interaction],
    audio: &AudioLibrary,
    frozen: Option<&EmbeddingStore>,
) -> Result<Vec<ScoredPair>> {
    let aes = embed_tracks(model, rows.iter().map(|r| r.track.as_str()), audio)?;
    let mut anchors = HashMap::new();
    rows.iter()
        .map(|r| {
            if !anchors.contains_key(&r.user) {
                anchors.insert(r.user.clone(), model.user_anchor(&r.user, frozen)?);
            }
            let score = cosine(anchors[&r.user].as_slice(), &aes[&r.track])?;
            Ok(ScoredPair::new(&r.user, &r.track, score as f64, r.liked))
        })
        .collect()
}

/// Validation metrics after one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when no pair scores above the threshold.
    pub val_precision: f64,
    pub val_auc: f64,
}

pub fn format_metrics_log(log: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch\ttrain_loss\tval_precision\tval_auc\n");
    for m in log {
        let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}", m.epoch, m.train_loss, m.val_precision, m.val_auc);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUC.
    pub model: AudioModel,
    pub log: Vec<EpochMetrics>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// Example-group recipe by track id; segments are attached per epoch.
enum Recipe<'a> {
    Labeled(&'a Interaction),
    Ranked(&'a Interaction, Vec<&'a str>),
}

fn recipes<'a>(cfg: &TrainConfig, train: &'a [Interaction], rng: &mut ChaCha8Rng) -> Vec<Recipe<'a>> {
    let mut by_user: BTreeMap<&str, [Vec<&Interaction>; 2]> = BTreeMap::new();
    for r in train {
        by_user.entry(&r.user).or_default()[r.liked as usize].push(r);
    }
    let mut out = Vec::new();
    for (user, [disliked, liked]) in by_user {
        if cfg.variant.kind == VariantKind::BasicBinary {
            let k = liked.len().min(disliked.len());
            out.extend(liked.choose_multiple(rng, k).map(|r| Recipe::Labeled(r)));
            out.extend(disliked.choose_multiple(rng, k).map(|r| Recipe::Labeled(r)));
            continue;
        }
        let n = cfg.variant.n_negatives;
        if disliked.len() < n {
            log::debug!("user {user} has {} disliked tracks, fewer than {n}; skipped", disliked.len());
            continue;
        }
        for pos in liked {
            let negs = disliked.choose_multiple(rng, n).map(|r| r.track.as_str()).collect();
            out.push(Recipe::Ranked(pos, negs));
        }
    }
    out
}

/// Trains the audio branch, keeping the parameters of the best validation epoch.
///
/// Segments are resampled every epoch; batches are averaged over their groups
/// and fed to Nesterov SGD. Training stops after `cfg.patience` epochs without
/// a validation-AUC improvement.
pub fn run_training(
    cfg: &TrainConfig,
    splits: &Splits,
    audio: &AudioLibrary,
    frozen: Option<&EmbeddingStore>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for r in splits.parts().into_iter().flatten() {
        audio.get(&r.track)?;
    }
    let users: Vec<String> = splits.train.iter().map(|r| r.user.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut model = AudioModel::new(cfg.variant, &cfg.cnn_channels, &users, cfg.seed)?;
    if cfg.variant.kind != VariantKind::Dcue {
        let ue = frozen.ok_or_else(|| Error::Contract(format!("{} needs frozen user embeddings", cfg.variant.kind)))?;
        if let Some(u) = splits.parts().into_iter().flatten().find(|r| !ue.contains(&r.user)) {
            return Err(Error::Vocabulary(format!("user `{}` has no user embedding", u.user)));
        }
    }
    let mut opt = Nesterov::new(cfg.lr0, cfg.momentum, cfg.decay)?;
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let ctx = cfg.variant.context_duration;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0xa076_1d64_78bd_642f));
        let mut groups = recipes(cfg, &splits.train, &mut rng);
        if groups.is_empty() {
            return Err(Error::Contract("no training groups could be formed".into()));
        }
        groups.shuffle(&mut rng);

        let needed: BTreeSet<&str> = groups
            .iter()
            .flat_map(|g| match g {
                Recipe::Labeled(r) => vec![r.track.as_str()],
                Recipe::Ranked(p, n) => std::iter::once(p.track.as_str()).chain(n.iter().copied()).collect(),
            })
            .collect();
        let segments: HashMap<&str, LogMelSegment> = needed
            .into_par_iter()
            .map(|t| Ok((t, sample_segment(audio.get(t)?, ctx, epoch_segment_seed(cfg.seed, epoch, t))?)))
            .collect::<Result<_>>()?;

        let mut total_loss = 0.0;
        let mut counted = 0usize;
        for batch in groups.chunks(cfg.batch_size) {
            let ahead = model.with_params(opt.lookahead(model.params()));
            let results: Vec<Result<(f64, ParamSet)>> = batch
                .par_iter()
                .map(|recipe| {
                    let group = match recipe {
                        Recipe::Labeled(r) => ExampleGroup {
                            user: &r.user,
                            inputs: GroupInputs::Labeled {
                                track: &segments[r.track.as_str()],
                                liked: r.liked,
                            },
                        },
                        Recipe::Ranked(p, negs) => ExampleGroup {
                            user: &p.user,
                            inputs: GroupInputs::Ranked {
                                positive: &segments[p.track.as_str()],
                                negatives: negs.iter().map(|t| &segments[t]).collect(),
                            },
                        },
                    };
                    ahead.group_gradients(&group, frozen)
                })
                .collect();
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                match r {
                    Ok((loss, g)) => {
                        total_loss += loss;
                        grads.push(g);
                    }
                    // a zero-norm embedding has no defined cosine; drop that group
                    Err(Error::Degenerate(msg)) => log::warn!("epoch {epoch}: skipped group: {msg}"),
                    Err(e) => return Err(e),
                }
            }
            if grads.is_empty() {
                continue;
            }
            let k = grads.len();
            counted += k;
            let mut mean = ParamSet::sum_all(grads);
            mean.scale(1.0 / k as f32);
            opt.step(model.params_mut(), &mean)?;
        }
        if !model.params().is_finite() {
            return Err(Error::Contract(format!("parameters diverged in epoch {epoch}")));
        }

        let pairs = score_interactions(&model, &splits.val, audio, frozen)?;
        let val_auc = auc(&pairs)?;
        let val_precision = precision(&pairs, cfg.threshold).unwrap_or(f64::NAN);
        let train_loss = if counted > 0 { total_loss / counted as f64 } else { f64::NAN };
        log::info!(
            "epoch {epoch}: loss {train_loss:.4}, val AUC {val_auc:.4}, val precision {val_precision:.4}"
        );
        log.push(EpochMetrics {
            epoch,
            train_loss,
            val_precision,
            val_auc,
        });
        if best.as_ref().is_none_or(|b| val_auc > b.0) {
            best = Some((val_auc, epoch, model.params().clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            log::info!("no validation improvement for {} epochs; stopping", cfg.patience);
            break;
        }
    }
    let best_epoch = best.as_ref().map_or(0, |b| b.1);
    if let Some((_, _, params)) = best {
        model = model.with_params(params);
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
    })
}
