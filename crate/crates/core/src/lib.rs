//! Out-of-core detection of dense subtensors in N-way relations.
//!
//! A [`Relation`] is ingested from delimited text into an on-disk tuple
//! file. [`detect_topk`] then finds up to `k` dense blocks by peeling
//! low-mass attribute values, touching tuples only through sequential scans.

mod error;

pub mod density;
pub mod detector;
pub mod distributed;
pub mod instrument;
pub mod store;
pub mod synth;

pub use density::{density, density_after_removal, DensityMeasure, SubtensorShape};
pub use detector::{
    blocks_json, detect_topk, detect_topk_metered, Detection, DetectorConfig, DetectorStats,
    SelectionPolicy, Subtensor,
};
pub use error::{Error, Result};
pub use store::{ingest, ingest_reader, CacheBudget, Delimiter, IngestOptions, Relation, Storage};
