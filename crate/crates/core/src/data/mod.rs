//! Episodes, benchmark CSV ingestion, preprocessing and synthetic data.

mod csv_loader;
mod dataset;
mod prep;
mod series;
pub mod synth;

pub use csv_loader::{load_csv_dataset, parse_episode_csv, Manifest, ManifestEpisode, Schema, SchemaRef, VariableKind, VariableSpec};
pub use dataset::{labels_for, DatasetMeta, DatasetSplit, EpisodeRecord, Split, SCHEMA_VERSION};
pub use prep::{enumerate_windows, episode_feature, episode_features, subsample_training, truncate_and_pad, window_starts, EpisodeMode};
pub use series::MultivariateSeries;
pub use synth::{synth_generate, SynthConfig};
