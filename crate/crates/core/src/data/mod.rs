//! Stroke records, preprocessing, tokenization and batching.

mod batch;
pub mod io;
mod preprocess;
mod stroke;
pub mod synthetic;
mod vocab;

pub use batch::{make_batches, Batch, BatchItem, TrainingExample};
pub use io::{read_records, write_records, StyleDims};
pub use preprocess::{
    filter_outliers, merge_collinear, normalize, normalize_all, prepare, DropReport,
    DroppedRecord, NormalizationMode, PrepareOptions, Prepared, DEFAULT_ANGLE_TOL,
    DEFAULT_OUTLIER_K,
};
pub use stroke::{DatasetRecord, StrokeSequence, StyleImage};
pub use vocab::{Tokens, Vocab, PAD, UNK};
