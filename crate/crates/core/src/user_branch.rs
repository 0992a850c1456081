use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::{UserEmbedding, EMBEDDING_DIM};
use crate::error::{ensure, Error, Result};
use crate::index::{EmbeddingStore, StoreKind};
use crate::nd::{load_checkpoint, save_checkpoint, BoundParams, Graph, ParamSet, Real, Tensor, Var};
use crate::train::{Demographics, Interaction, Nesterov};

pub const HIDDEN: [usize; 2] = [128, 64];
pub const LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_NEGATIVES: usize = 20;

/// Feature groups of a user history, in concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Track,
    Album,
    Artist,
    Demographic,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Track, Group::Album, Group::Artist, Group::Demographic];

    fn name(self) -> &'static str {
        match self {
            Group::Track => "track",
            Group::Album => "album",
            Group::Artist => "artist",
            Group::Demographic => "demographic",
        }
    }

    fn table(self) -> String {
        format!("user.table.{}", self.name())
    }
}

const CLASSES: &str = "user.classes";

fn layer(i: usize) -> (String, String) {
    let stem = match i {
        0 => "user.hidden1",
        1 => "user.hidden2",
        _ => "user.out",
    };
    (format!("{stem}.weight"), format!("{stem}.bias"))
}

/// Id ↔ row maps for the four lookup tables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserVocab {
    ids: [Vec<String>; 4],
    rows: [HashMap<String, usize>; 4],
}

impl UserVocab {
    /// Every id seen in the interactions and demographics, sorted.
    pub fn build(interactions: &[Interaction], demographics: &Demographics) -> Self {
        let mut sets: [std::collections::BTreeSet<&str>; 4] = Default::default();
        for r in interactions {
            sets[0].insert(&r.track);
            sets[1].insert(&r.album);
            sets[2].insert(&r.artist);
        }
        for feats in demographics.values() {
            sets[3].extend(feats.iter().map(String::as_str));
        }
        let mut v = UserVocab::default();
        for (g, set) in sets.into_iter().enumerate() {
            for id in set {
                v.push(g, id.to_string());
            }
        }
        v
    }

    fn push(&mut self, group: usize, id: String) {
        if !self.rows[group].contains_key(&id) {
            self.rows[group].insert(id.clone(), self.ids[group].len());
            self.ids[group].push(id);
        }
    }

    pub fn len(&self, group: Group) -> usize {
        self.ids[group as usize].len()
    }

    pub fn ids(&self, group: Group) -> &[String] {
        &self.ids[group as usize]
    }

    pub fn row(&self, group: Group, id: &str) -> Result<usize> {
        self.rows[group as usize]
            .get(id)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown {} id `{id}`", group.name())))
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        for g in Group::ALL {
            for id in self.ids(g) {
                let _ = writeln!(s, "{}\t{id}", g.name());
            }
        }
        s
    }

    fn parse(text: &str) -> Result<Self> {
        let mut v = UserVocab::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (g, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("vocabulary line {}: missing tab", n + 1)))?;
            let group = Group::ALL
                .iter()
                .position(|x| x.name() == g)
                .ok_or_else(|| Error::Format(format!("vocabulary line {}: unknown group `{g}`", n + 1)))?;
            v.push(group, id.to_string());
        }
        Ok(v)
    }
}

/// A user's listening history and demographic features, by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserHistory {
    pub track_ids: Vec<String>,
    pub album_ids: Vec<String>,
    pub artist_ids: Vec<String>,
    pub demographics: Vec<String>,
}

impl UserHistory {
    pub fn push(&mut self, r: &Interaction) {
        self.track_ids.push(r.track.clone());
        self.album_ids.push(r.album.clone());
        self.artist_ids.push(r.artist.clone());
    }
}

/// Table rows of a history, one list per [`Group`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistoryRows(pub [Vec<usize>; 4]);

impl HistoryRows {
    pub fn resolve(history: &UserHistory, vocab: &UserVocab) -> Result<Self> {
        ensure!(
            history.track_ids.len() == history.album_ids.len()
                && history.track_ids.len() == history.artist_ids.len(),
            Contract,
            "track, album and artist lists must be index-aligned"
        );
        let lists = [
            &history.track_ids,
            &history.album_ids,
            &history.artist_ids,
            &history.demographics,
        ];
        let mut out = HistoryRows::default();
        for (g, ids) in Group::ALL.into_iter().zip(lists) {
            out.0[g as usize] = ids.iter().map(|id| vocab.row(g, id)).collect::<Result<_>>()?;
        }
        Ok(out)
    }
}

/// Group means → concat (160) → 128 → 64 (leaky ReLU) → 40, the UE.
pub fn user_forward<T: Real>(g: &mut Graph<T>, p: &BoundParams, rows: &HistoryRows) -> Result<Var> {
    let means = Group::ALL
        .iter()
        .map(|&grp| g.gather_mean(p.var(&grp.table())?, &rows.0[grp as usize]))
        .collect::<Result<Vec<_>>>()?;
    let mut h = g.concat(&means)?;
    for i in 0..3 {
        let (w, b) = layer(i);
        h = g.dense(h, p.var(&w)?, Some(p.var(&b)?))?;
        if i < 2 {
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    Ok(h)
}

/// `−log softmax(ue · [class_pos, class_neg…])[0]`.
pub fn class_objective<T: Real>(
    g: &mut Graph<T>,
    classes: Var,
    ue: Var,
    positive: usize,
    negatives: &[usize],
) -> Result<Var> {
    ensure!(!negatives.is_empty(), Contract, "sampled class loss needs at least one negative");
    ensure!(
        !negatives.contains(&positive),
        Contract,
        "positive class {positive} also drawn as a negative"
    );
    let mut ids = vec![positive];
    ids.extend_from_slice(negatives);
    let rows = g.gather_rows(classes, &ids)?;
    let logits = g.dense(ue, rows, None)?;
    g.softmax_ce(logits, 0)
}

/// Lookup tables, hidden layers and output classes of the user branch.
#[derive(Clone, Debug, PartialEq)]
pub struct UserBranch {
    vocab: UserVocab,
    params: ParamSet,
}

impl UserBranch {
    pub fn new(vocab: UserVocab, seed: u64) -> Result<Self> {
        ensure!(vocab.len(Group::Track) >= 2, Contract, "the track vocabulary needs at least 2 ids");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for g in Group::ALL {
            // an unused row keeps an empty group's table well-formed
            let rows = vocab.len(g).max(1);
            params.init_uniform(&g.table(), &[rows, EMBEDDING_DIM], 1, EMBEDDING_DIM, &mut rng);
        }
        let widths = [4 * EMBEDDING_DIM, HIDDEN[0], HIDDEN[1], EMBEDDING_DIM];
        for i in 0..3 {
            let (w, b) = layer(i);
            params.init_uniform(&w, &[widths[i + 1], widths[i]], widths[i], widths[i + 1], &mut rng);
            params.init_zeros(&b, &[widths[i + 1]]);
        }
        params.init_uniform(
            CLASSES,
            &[vocab.len(Group::Track), EMBEDDING_DIM],
            EMBEDDING_DIM,
            1,
            &mut rng,
        );
        Ok(Self { vocab, params })
    }

    pub fn from_parts(vocab: UserVocab, params: ParamSet) -> Result<Self> {
        for g in Group::ALL {
            let s = params.get(&g.table())?.shape();
            ensure!(
                s == [vocab.len(g).max(1), EMBEDDING_DIM],
                Format,
                "{} table has shape {s:?} for {} ids",
                g.name(),
                vocab.len(g)
            );
        }
        ensure!(
            params.get(CLASSES)?.shape() == [vocab.len(Group::Track), EMBEDDING_DIM],
            Format,
            "class table does not match the track vocabulary"
        );
        Ok(Self { vocab, params })
    }

    pub fn vocab(&self) -> &UserVocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn embed(&self, history: &UserHistory) -> Result<UserEmbedding> {
        let rows = HistoryRows::resolve(history, &self.vocab)?;
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let ue = user_forward(&mut g, &bound, &rows)?;
        UserEmbedding::new(g.value(ue).data().to_vec())
    }

    /// `ue · class_row` for every track in vocabulary order.
    pub fn class_scores(&self, ue: &[f32]) -> Result<Vec<f64>> {
        ensure!(ue.len() == EMBEDDING_DIM, Dimension, "UE must have {EMBEDDING_DIM} values");
        let classes = self.params.get(CLASSES)?;
        Ok(classes
            .data()
            .chunks_exact(EMBEDDING_DIM)
            .map(|row| row.iter().zip(ue).map(|(&a, &b)| a as f64 * b as f64).sum())
            .collect())
    }

    /// The `n` highest-scoring tracks not in `exclude`, ties by ascending id.
    pub fn recommend(&self, ue: &[f32], n: usize, exclude: &std::collections::HashSet<&str>) -> Result<Vec<String>> {
        let scores = self.class_scores(ue)?;
        let ids = self.vocab.ids(Group::Track);
        let mut order: Vec<usize> = (0..ids.len()).filter(|&i| !exclude.contains(ids[i].as_str())).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
        Ok(order.into_iter().take(n).map(|i| ids[i].clone()).collect())
    }

    /// Loss and gradients of one (history, next track) example.
    fn example_gradients(&self, rows: &HistoryRows, positive: usize, negatives: &[usize]) -> Result<(f64, ParamSet)> {
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind(&mut g);
        let ue = user_forward(&mut g, &bound, rows)?;
        let loss = class_objective(&mut g, bound.var(CLASSES)?, ue, positive, negatives)?;
        let value = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?;
        Ok((value, self.params.gradients_from(&bound, &grads)?))
    }

    fn example_loss(&self, rows: &HistoryRows, positive: usize, negatives: &[usize]) -> Result<f64> {
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind_frozen(&mut g);
        let ue = user_forward(&mut g, &bound, rows)?;
        let loss = class_objective(&mut g, bound.var(CLASSES)?, ue, positive, negatives)?;
        Ok(g.value(loss).data()[0] as f64)
    }

    /// Writes the parameters to `path` and the vocabulary next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(&self.params, path)?;
        let vp = vocab_path(path);
        std::fs::write(&vp, self.vocab.to_text()).map_err(|e| Error::io(vp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let params = load_checkpoint(path)?;
        let vp = vocab_path(path);
        let text = std::fs::read_to_string(&vp).map_err(|e| Error::io(&vp, e))?;
        Self::from_parts(UserVocab::parse(&text)?, params)
    }
}

/// Sidecar file holding the id vocabulary of a saved user branch.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

/// Sampled-softmax loss of `ue` for one positive track against negatives.
pub fn sampled_class_loss(model: &UserBranch, ue: &[f32], positive: &str, negatives: &[String]) -> Result<f64> {
    ensure!(ue.len() == EMBEDDING_DIM, Dimension, "UE must have {EMBEDDING_DIM} values");
    let pos = model.vocab.row(Group::Track, positive)?;
    let negs = negatives
        .iter()
        .map(|t| model.vocab.row(Group::Track, t))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::<f64>::new();
    let classes = g.constant(model.params.get(CLASSES)?.cast());
    let u = g.constant(Tensor::vector(ue.iter().map(|&v| v as f64).collect()));
    let loss = class_objective(&mut g, classes, u, pos, &negs)?;
    Ok(g.value(loss).data()[0])
}

/// Liked histories in timestamp order, with demographics attached.
pub fn liked_histories(rows: &[Interaction], demographics: &Demographics) -> BTreeMap<String, UserHistory> {
    let mut liked: Vec<&Interaction> = rows.iter().filter(|r| r.liked).collect();
    liked.sort_by(|a, b| (&a.user, a.timestamp, &a.track).cmp(&(&b.user, b.timestamp, &b.track)));
    let mut out: BTreeMap<String, UserHistory> = BTreeMap::new();
    for r in liked {
        out.entry(r.user.clone()).or_default().push(r);
    }
    for (user, feats) in demographics {
        if let Some(h) = out.get_mut(user) {
            h.demographics = feats.clone();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub n_negatives: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub decay: f64,
    pub seed: u64,
}

impl Default for UserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            n_negatives: DEFAULT_NEGATIVES,
            lr0: 0.1,
            momentum: 0.9,
            decay: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UserTraining {
    pub model: UserBranch,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Mean validation loss per epoch, empty without validation rows.
    pub val_loss: Vec<f64>,
}

struct Example {
    rows: HistoryRows,
    positive: usize,
}

/// Each liked track after the first becomes the target of the history of
/// the likes before it.
fn prefix_examples(
    vocab: &UserVocab,
    histories: &BTreeMap<String, UserHistory>,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for h in histories.values() {
        for t in 1..h.track_ids.len() {
            let prefix = UserHistory {
                track_ids: h.track_ids[..t].to_vec(),
                album_ids: h.album_ids[..t].to_vec(),
                artist_ids: h.artist_ids[..t].to_vec(),
                demographics: h.demographics.clone(),
            };
            out.push(Example {
                rows: HistoryRows::resolve(&prefix, vocab)?,
                positive: vocab.row(Group::Track, &h.track_ids[t])?,
            });
        }
    }
    Ok(out)
}

/// `k` distinct classes out of `0..vocab`, none equal to `positive`.
fn draw_negatives(rng: &mut ChaCha8Rng, vocab: usize, positive: usize, k: usize) -> Vec<usize> {
    let k = k.min(vocab - 1);
    index::sample(rng, vocab - 1, k)
        .into_iter()
        .map(|i| if i >= positive { i + 1 } else { i })
        .collect()
}

/// Trains on (liked-history prefix → next liked track) examples from `train`.
/// Validation examples pair each user's full training history with each of
/// their liked tracks in `val`, against fixed negatives.
pub fn train_user_branch(
    vocab: UserVocab,
    train: &[Interaction],
    val: &[Interaction],
    demographics: &Demographics,
    cfg: &UserTrainConfig,
) -> Result<UserTraining> {
    ensure!(cfg.batch_size >= 1 && cfg.n_negatives >= 1, Contract, "batch size and negatives must be positive");
    let histories = liked_histories(train, demographics);
    let examples = prefix_examples(&vocab, &histories)?;
    ensure!(!examples.is_empty(), Contract, "no training examples: every user needs at least two liked tracks");
    let mut model = UserBranch::new(vocab, cfg.seed)?;
    let n_tracks = model.vocab.len(Group::Track);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x75e5);
    let mut val_set = Vec::new();
    for r in val.iter().filter(|r| r.liked) {
        let Some(h) = histories.get(&r.user) else { continue };
        let positive = model.vocab.row(Group::Track, &r.track)?;
        let negs = draw_negatives(&mut rng, n_tracks, positive, cfg.n_negatives);
        val_set.push((HistoryRows::resolve(h, &model.vocab)?, positive, negs));
    }

    let mut opt = Nesterov::new(cfg.lr0, cfg.momentum, cfg.decay)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let (mut train_loss, mut val_loss) = (Vec::new(), Vec::new());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let drawn: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| draw_negatives(&mut rng, n_tracks, examples[i].positive, cfg.n_negatives))
                .collect();
            let ahead = UserBranch {
                vocab: model.vocab.clone(),
                params: opt.lookahead(&model.params),
            };
            let results = batch
                .par_iter()
                .zip(&drawn)
                .map(|(&i, negs)| ahead.example_gradients(&examples[i].rows, examples[i].positive, negs))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Vec::with_capacity(results.len());
            for (loss, g) in results {
                total += loss;
                grads.push(g);
            }
            let mut mean = ParamSet::sum_all(grads);
            mean.scale(1.0 / batch.len() as f32);
            opt.step(&mut model.params, &mean)?;
        }
        train_loss.push(total / examples.len() as f64);
        if !val_set.is_empty() {
            let sum: f64 = val_set
                .par_iter()
                .map(|(rows, p, n)| model.example_loss(rows, *p, n))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum();
            val_loss.push(sum / val_set.len() as f64);
        }
        log::info!(
            "user branch epoch {}: train loss {:.4}{}",
            epoch + 1,
            train_loss.last().unwrap(),
            val_loss.last().map_or(String::new(), |v| format!(", val loss {v:.4}"))
        );
    }
    Ok(UserTraining {
        model,
        train_loss,
        val_loss,
    })
}

/// One UE per user, in a user store.
pub fn export_user_embeddings(model: &UserBranch, users: &BTreeMap<String, UserHistory>) -> Result<EmbeddingStore> {
    let entries = users
        .par_iter()
        .map(|(u, h)| Ok((u.clone(), model.embed(h)?.into_vec())))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingStore::build(StoreKind::User, entries)
}
