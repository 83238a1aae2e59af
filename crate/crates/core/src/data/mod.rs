//! Dataset schema, ingestion, negative sampling, synthetic corpora and
//! corpus statistics.

pub mod image;
pub mod manifest;
pub mod negatives;
pub mod schema;
pub mod stats;
pub mod synthetic;
pub mod vocab;

pub use self::image::Image;
pub use manifest::{load_dataset, write_dataset, DatasetReader};
pub use negatives::sample_negatives;
pub use schema::{pad_or_truncate, Dataset, DialogContext, HistoryPair, Sample, Sticker, Utterance};
pub use stats::{dataset_stats, StatsReport};
pub use synthetic::{gen_synthetic, SyntheticSpec};
pub use vocab::Vocab;
