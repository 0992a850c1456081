//! Genre classification on top of external features and audio embeddings.

pub mod pca;
pub mod pipeline;
pub mod svm;

pub use pca::Pca;
pub use pipeline::{
    genre_pipeline, load_features, parse_features, ConditionReport, GenreClassifier, GenreConfig, GenreEntry,
    GenreManifest, GenreReport, Partition, Standardizer,
};
pub use svm::{rbf, BinarySvm, SvmModel};
