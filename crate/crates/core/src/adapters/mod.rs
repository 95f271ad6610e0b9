//! Per-concept low-rank adapters routed to the rows of their bound tokens.

mod adapter;
mod apply;
mod db;
mod train;

pub use adapter::{AdapterInfo, BlockAdapter, ConceptAdapter, LowRank, Target, Variant};
pub use apply::{apply_merged, apply_token_wise, AdapterEntry, AdapterHook, AdapterSet, MergeMode};
pub use db::{AdapterDb, AdapterListing};
pub use train::{concept_loss, train_adapter, AdapterTrainConfig, AdapterTrainLog, MIN_CONCEPT_IMAGES};
