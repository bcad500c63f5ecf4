//! Synthetic classification tasks and the dataset file format.

mod dataset;
mod synthetic;

pub use dataset::{load_dataset, save_dataset, split, Dataset};
pub use synthetic::{gen_synthetic, motif_pairs, SyntheticTaskSpec, TaskKind};
