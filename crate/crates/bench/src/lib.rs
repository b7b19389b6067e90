//! Shared fixtures for the benchmarks.

use refrank_core::afs::{AfsConfig, AfsModel};
use refrank_core::store::EmbeddingStore;
use refrank_core::synth::{generate, SynthConfig};

/// Default synthetic store with `n_items` items.
pub fn store(n_items: usize) -> EmbeddingStore {
    generate(&SynthConfig { n_items, ..SynthConfig::default() }).expect("default synthetic config is valid")
}

/// Untrained summarizer shaped for `store`; speed does not depend on weights.
pub fn model(store: &EmbeddingStore) -> AfsModel {
    let config = AfsConfig::for_store(store, 4, 5, 0).expect("synthetic stores carry token features");
    AfsModel::init(config).expect("config from a valid store")
}

/// First caption embedding of item `i`, widened.
pub fn query(store: &EmbeddingStore, i: usize) -> Vec<f64> {
    store.caption_embedding(store.items[i].caption_start).iter().map(|&v| v as f64).collect()
}
