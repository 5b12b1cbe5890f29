//! Synthetic scene → report data, the word-level tokenizer, and JSON Lines
//! manifests for paired image/report datasets.

mod dataset;
mod image;
mod scene;
mod template;
mod tokenizer;

pub use dataset::{
    filter_split, generate_dataset, generate_record, generate_record_with, load_dataset, normalize_report,
    record_seed, resolve_manifest, split_of, write_dataset, DatasetRecord, Split, SyntheticConfig, MANIFEST_NAME,
};
pub use image::{quadrant_mass, render, Image, ImageDims};
pub use scene::{PlacedShape, Quadrant, SceneSpec, ShapeKind, ShapeSize, MAX_SHAPES};
pub use template::{parse_report, report_len, templatize, CLOSING};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, RESERVED, UNK};
