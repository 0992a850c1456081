mod audio;
mod config;
mod data;
mod optim;
mod split;

pub use audio::{
    embed_tracks, eval_segment_seed, format_metrics_log, run_training, score_interactions,
    AudioLibrary, EpochMetrics, TrainOutcome,
};
pub use config::TrainConfig;
pub use data::{
    format_demographics, format_interactions, load_demographics, load_interactions,
    parse_demographics, parse_interactions, tracks_of, users_of, Demographics, Interaction,
};
pub(crate) use data::{fields, read_text, records};
pub use optim::Nesterov;
pub use split::{split_dataset, SplitMode, SplitSpec, Splits, MIN_PER_LABEL};
