//! `tunembed` command-line pipeline.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tunembed::audio_branch::AudioModel;
use tunembed::eval::{hit_rate_at_n, parse_scores, EvalReport, ScoredPair};
use tunembed::frontend::{decode_pcm, extract_dir, log_mel, sample_segment};
use tunembed::index::{EmbeddingStore, StoreKind};
use tunembed::nd::{load_checkpoint, save_checkpoint};
use tunembed::synth::{generate, SyntheticSpec};
use tunembed::train::{
    embed_tracks, eval_segment_seed, format_metrics_log, load_demographics, load_interactions, run_training,
    score_interactions, split_dataset, AudioLibrary, Demographics, Interaction, SplitMode, SplitSpec, Splits,
    TrainConfig,
};
use tunembed::transfer::{genre_pipeline, load_features, GenreConfig, GenreManifest};
use tunembed::user_branch::{
    export_user_embeddings, liked_histories, train_user_branch, UserBranch, UserTrainConfig, UserVocab,
};

/// Bad flag combinations; exit code 1 like parse errors.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "tunembed", version, about = "User and audio embeddings for music recommendation")]
struct Cli {
    /// Worker threads for parallel sections [default: all cores]
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed for splits, sampling and initialisation [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted-preference corpus: audio/, interactions, demographics, genres, tastes
    GenSynthetic(GenArgs),
    /// Convert every .wav of a directory into log-mel cache files
    ExtractFeatures(ExtractArgs),
    /// Train the user branch on the training split
    TrainUser(TrainUserArgs),
    /// Export user embeddings from a trained user branch
    ExportUe(ExportUeArgs),
    /// Train the audio branch against frozen user embeddings
    TrainAudio(TrainAudioArgs),
    /// Export audio embeddings of every cached track
    ExportAe(ExportAeArgs),
    /// Rank users for a new track
    Recommend(RecommendArgs),
    /// AUC and precision of scored pairs or of a trained model on one split
    Evaluate(EvaluateArgs),
    /// Genre classification with and without audio embeddings
    Genre(GenreArgs),
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// Interaction manifest
    #[arg(long)]
    interactions: PathBuf,
    /// per_user or disjoint_users
    #[arg(long, default_value = "per_user")]
    split_mode: SplitMode,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 1000)]
    tracks: usize,
    #[arg(long, default_value_t = 4)]
    genres: usize,
    #[arg(long, default_value_t = 10)]
    likes: usize,
    #[arg(long, default_value_t = 10)]
    dislikes: usize,
    /// Length of every generated track in seconds
    #[arg(long, default_value_t = 30.0)]
    seconds: f64,
    /// Standard deviation of the noise added to user tastes
    #[arg(long, default_value_t = 0.0)]
    taste_noise: f64,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Directory of .wav files named <track_id>.wav
    #[arg(long)]
    audio_dir: PathBuf,
    /// Output directory for <track_id>.lmel files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainUserArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    demographics: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Sampled negative classes per example
    #[arg(long, default_value_t = 20)]
    negatives: usize,
    /// Checkpoint path; the vocabulary goes next to it as <out>.vocab
    #[arg(long, default_value = "user.ckpt")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportUeArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    demographics: Option<PathBuf>,
    #[arg(long, default_value = "user.ckpt")]
    model: PathBuf,
    #[arg(long, default_value = "ue.embs")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainAudioArgs {
    #[arg(long)]
    interactions: PathBuf,
    /// Directory of log-mel cache files
    #[arg(long)]
    features: PathBuf,
    /// Frozen user embeddings; not needed for the dcue variant
    #[arg(long)]
    ue: Option<PathBuf>,
    /// Experiment config file (key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable, e.g. --set variant=metric --set n_negatives=4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = "audio.ckpt")]
    out: PathBuf,
    /// Per-epoch metrics log
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportAeArgs {
    #[arg(long, default_value = "audio.ckpt")]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "ae.embs")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RecommendArgs {
    /// Audio file of the new track
    #[arg(long)]
    track: PathBuf,
    /// User embedding store
    #[arg(long)]
    users: PathBuf,
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Audio-branch checkpoint
    #[arg(long, default_value = "audio.ckpt")]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Scored pairs: `user track score label` or `score label` per line
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long, default_value = "per_user")]
    split_mode: SplitMode,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    /// User embedding store
    #[arg(long)]
    ue: Option<PathBuf>,
    /// Audio embedding store; alternative to --model with --features
    #[arg(long)]
    ae: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Decision threshold for precision
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    /// Also report hit rate of top-N retrieval over the audio embedding store
    #[arg(long)]
    top_n: Option<usize>,
    /// Write the key = value report here as well
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenreArgs {
    /// Per-track baseline features: track_id followed by floats
    #[arg(long)]
    features: PathBuf,
    /// track_id, genre, optional train/val/test tag
    #[arg(long)]
    manifest: PathBuf,
    /// Audio embeddings to concatenate as a second condition
    #[arg(long)]
    ae: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pca_dim: usize,
    #[arg(long, default_value_t = 1.0 / 128.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Train share of each genre when the manifest has no split tags
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on usage
/// errors, 2 on data or contract errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.unwrap_or(0))
        .build()
        .map_err(|e| anyhow!("cannot start worker pool: {e}"))
        .and_then(|pool| pool.install(|| dispatch(&cli)));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a, seed),
        Command::ExtractFeatures(a) => {
            let n = extract_dir(&a.audio_dir, &a.out)?;
            if n == 0 {
                bail!(tunembed::Error::Ingestion(format!("no .wav files in {}", a.audio_dir.display())));
            }
            println!("extracted {n} tracks into {}", a.out.display());
            Ok(())
        }
        Command::TrainUser(a) => train_user(a, seed),
        Command::ExportUe(a) => export_ue(a, seed),
        Command::TrainAudio(a) => train_audio(a, cli.seed),
        Command::ExportAe(a) => export_ae(a),
        Command::Recommend(a) => recommend(a),
        Command::Evaluate(a) => evaluate(a, seed),
        Command::Genre(a) => genre(a, seed),
    }
}

fn gen_synthetic(a: &GenArgs, seed: u64) -> Result<()> {
    let spec = SyntheticSpec {
        n_users: a.users,
        n_tracks: a.tracks,
        n_genres: a.genres,
        seed,
        taste_noise: a.taste_noise,
        likes_per_user: a.likes,
        dislikes_per_user: a.dislikes,
        track_seconds: a.seconds,
        ..SyntheticSpec::default()
    };
    let corpus = generate(&spec)?;
    corpus.write_to(&a.out)?;
    println!(
        "wrote {} users, {} tracks, {} interactions to {}",
        corpus.users.len(),
        corpus.tracks.len(),
        corpus.interactions.len(),
        a.out.display()
    );
    Ok(())
}

fn demographics(path: Option<&Path>) -> Result<Demographics> {
    Ok(match path {
        Some(p) => load_demographics(p)?,
        None => Demographics::new(),
    })
}

fn load_splits(path: &Path, mode: SplitMode, seed: u64) -> Result<(Vec<Interaction>, Splits)> {
    let rows = load_interactions(path)?;
    let splits = split_dataset(&rows, &SplitSpec::new(mode, seed))?;
    Ok((rows, splits))
}

fn train_user(a: &TrainUserArgs, seed: u64) -> Result<()> {
    let demo = demographics(a.demographics.as_deref())?;
    let (rows, splits) = load_splits(&a.split.interactions, a.split.split_mode, seed)?;
    let vocab = UserVocab::build(&rows, &demo);
    let cfg = UserTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        n_negatives: a.negatives,
        seed,
        ..UserTrainConfig::default()
    };
    let out = train_user_branch(vocab, &splits.train, &splits.val, &demo, &cfg)?;
    for (i, loss) in out.train_loss.iter().enumerate() {
        let val = out.val_loss.get(i).map_or(String::from("-"), |v| format!("{v:.6}"));
        log::info!("user epoch {}: train loss {loss:.6}, val loss {val}", i + 1);
    }
    out.model.save(&a.out)?;
    println!("saved user branch to {}", a.out.display());
    Ok(())
}

fn export_ue(a: &ExportUeArgs, seed: u64) -> Result<()> {
    let demo = demographics(a.demographics.as_deref())?;
    let (_, splits) = load_splits(&a.split.interactions, a.split.split_mode, seed)?;
    let model = UserBranch::load(&a.model)?;
    let store = export_user_embeddings(&model, &liked_histories(&splits.train, &demo))?;
    store.save(&a.out)?;
    println!("exported {} user embeddings to {}", store.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainAudioArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = &a.variant {
        cfg.set("variant", v)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_audio(a: &TrainAudioArgs, seed: Option<u64>) -> Result<()> {
    let cfg = train_config(a, seed)?;
    let (_, splits) = load_splits(&a.interactions, cfg.split_mode, cfg.seed)?;
    let audio = AudioLibrary::load_dir(&a.features)?;
    let ue = a.ue.as_ref().map(EmbeddingStore::load).transpose()?;
    log::info!("training {} on {} cached tracks", cfg.variant.label(), audio.len());
    let out = run_training(&cfg, &splits, &audio, ue.as_ref())?;
    let log_text = format_metrics_log(&out.log);
    eprint!("{log_text}");
    if let Some(p) = &a.log {
        std::fs::write(p, &log_text).with_context(|| format!("writing {}", p.display()))?;
    }
    save_checkpoint(out.model.params(), &a.out)?;
    println!("best epoch {}; saved audio branch to {}", out.best_epoch, a.out.display());
    Ok(())
}

fn load_audio_model(path: &Path) -> Result<AudioModel> {
    Ok(AudioModel::from_params(load_checkpoint(path)?)?)
}

fn export_ae(a: &ExportAeArgs) -> Result<()> {
    let model = load_audio_model(&a.model)?;
    let audio = AudioLibrary::load_dir(&a.features)?;
    let aes = embed_tracks(&model, audio.track_ids(), &audio)?;
    let store = EmbeddingStore::build(StoreKind::Audio, aes)?;
    store.save(&a.out)?;
    println!("exported {} audio embeddings to {}", store.len(), a.out.display());
    Ok(())
}

fn recommend(a: &RecommendArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let model = load_audio_model(&a.model)?;
    let users = EmbeddingStore::load(&a.users)?;
    let bytes = std::fs::read(&a.track).with_context(|| format!("reading {}", a.track.display()))?;
    let spec = log_mel(&decode_pcm(&bytes)?)?;
    let id = a.track.file_stem().and_then(|s| s.to_str()).unwrap_or("track");
    let seg = sample_segment(&spec, model.variant().context_duration, eval_segment_seed(id))?;
    let ae = model.embed(&seg)?;
    for s in tunembed::index::recommend_new_track(ae.as_slice(), &users, a.n)? {
        println!("{}\t{:.6}", s.id, s.score);
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs, seed: u64) -> Result<()> {
    let (label, pairs, hits) = match &a.scores {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            (p.display().to_string(), parse_scores(&text)?, None)
        }
        None => evaluate_model(a, seed)?,
    };
    let report = EvalReport::compute(&label, &pairs, a.threshold)?;
    let mut kv = report.to_key_values();
    if let Some((n, rate)) = hits {
        let _ = writeln!(kv, "hit_rate_at_{n} = {rate:.6}");
    }
    eprint!("{}", report.to_text());
    print!("{kv}");
    if let Some(p) = &a.out {
        std::fs::write(p, &kv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

type Evaluated = (String, Vec<ScoredPair>, Option<(usize, f64)>);

fn evaluate_model(a: &EvaluateArgs, seed: u64) -> Result<Evaluated> {
    let interactions = a
        .interactions
        .as_ref()
        .ok_or_else(|| usage("evaluate needs --scores or --interactions"))?;
    let (_, splits) = load_splits(interactions, a.split_mode, seed)?;
    let rows = match a.split.as_str() {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => return Err(usage(format!("--split must be train, val or test, got `{other}`"))),
    };
    let ue = a.ue.as_ref().map(EmbeddingStore::load).transpose()?;
    let (pairs, ae_store) = match (&a.ae, &a.model) {
        (Some(ae_path), None) => {
            let ue = ue.as_ref().ok_or_else(|| usage("--ae needs --ue"))?;
            let ae = EmbeddingStore::load(ae_path)?;
            let pairs = rows
                .iter()
                .map(|r| {
                    let u = ue.get(&r.user)?;
                    let t = ae.get(&r.track).map_err(|_| {
                        tunembed::Error::Ingestion(format!("track `{}` has no audio embedding", r.track))
                    })?;
                    Ok(ScoredPair::new(&r.user, &r.track, u.cosine(&t) as f64, r.liked))
                })
                .collect::<Result<Vec<_>>>()?;
            (pairs, Some(ae))
        }
        (None, Some(model_path)) => {
            let features = a.features.as_ref().ok_or_else(|| usage("--model needs --features"))?;
            let model = load_audio_model(model_path)?;
            let audio = AudioLibrary::load_dir(features)?;
            (score_interactions(&model, rows, &audio, ue.as_ref())?, None)
        }
        _ => return Err(usage("give exactly one of --ae or --model")),
    };
    let hits = match a.top_n {
        None => None,
        Some(n) => {
            let ae = ae_store.as_ref().ok_or_else(|| usage("--top-n needs --ae"))?;
            let ue = ue.as_ref().ok_or_else(|| usage("--top-n needs --ue"))?;
            Some((n, retrieval_hit_rate(&splits, rows, ue, ae, n)?))
        }
    };
    Ok((a.split.clone(), pairs, hits))
}

/// Ranks every track a user has not interacted with outside `rows` and checks
/// the liked tracks of `rows` against the top `n`.
fn retrieval_hit_rate(
    splits: &Splits,
    rows: &[Interaction],
    ue: &EmbeddingStore,
    ae: &EmbeddingStore,
    n: usize,
) -> Result<f64> {
    let held: BTreeSet<(&str, &str)> = rows.iter().map(|r| (r.user.as_str(), r.track.as_str())).collect();
    let mut seen: BTreeMap<&str, HashSet<&str>> = BTreeMap::new();
    for r in splits.parts().into_iter().flatten() {
        if !held.contains(&(r.user.as_str(), r.track.as_str())) {
            seen.entry(&r.user).or_default().insert(&r.track);
        }
    }
    let mut heldout: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.liked) {
        heldout.entry(r.user.clone()).or_default().insert(r.track.clone());
    }
    let empty = HashSet::new();
    let mut recs = BTreeMap::new();
    for user in heldout.keys() {
        let skip = seen.get(user.as_str()).unwrap_or(&empty);
        let ranked = ae.top_n(ue.get(user)?.as_slice(), n + skip.len())?;
        let top: Vec<String> = ranked
            .into_iter()
            .filter(|s| !skip.contains(s.id.as_str()))
            .take(n)
            .map(|s| s.id)
            .collect();
        recs.insert(user.clone(), top);
    }
    Ok(hit_rate_at_n(&recs, &heldout, n)?)
}

fn genre(a: &GenreArgs, seed: u64) -> Result<()> {
    let manifest = GenreManifest::load(&a.manifest)?;
    let baseline = load_features(&a.features)?;
    let ae = a.ae.as_ref().map(EmbeddingStore::load).transpose()?;
    let cfg = GenreConfig {
        pca_dim: a.pca_dim,
        gamma: a.gamma,
        c: a.c,
        train_fraction: a.train_fraction,
        seed,
    };
    let report = genre_pipeline(&manifest, &baseline, ae.as_ref(), &cfg)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(p) = &a.out {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
