//! Planted-correspondence data generation and slow reference implementations
//! used as test oracles.

mod oracle;
mod planted;

pub use oracle::{brute_force_bundle, brute_force_total_loss, PairFeatures};
pub use planted::{
    generate_planted_dataset, planted_alignment_accuracy, write_planted_dataset, PlantedDataset,
    PlantedParams, TruthMap, TRUTH_FILE,
};
