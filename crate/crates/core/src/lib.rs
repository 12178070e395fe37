//! Road-network representation learning that encodes two geographic laws
//! into graph contrastive training.
//!
//! The pipeline contrasts a topology view of the road graph against
//!
//! * a kNN graph over geographic-configuration vectors (similar surroundings
//!   should give similar representations), with negatives drawn from a
//!   certified random regular expander standing in for the complete graph, and
//! * a personalized-PageRank diffusion view (nearby roads should agree).
//!
//! Encoders are linear SGC filters `Ŝᴷ H Θ`, the objective is a pair of
//! Jensen–Shannon mutual-information losses with bilinear discriminators, and
//! gradients are closed-form. [`trainer::train`] runs the optimisation and
//! [`trainer::embed`] produces the fused road embeddings consumed by
//! [`evaluate`].

pub mod augment;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod objective;
pub mod trainer;

#[cfg(test)]
#[path = "../tests/common/oracle.rs"]
mod test_oracle;

pub use augment::{
    config_similarity, knn_similarity_graph, ppr_diffusion, regular_negative_graph, shuffle_rows,
    ViewSet,
};
pub use data::{generate_synthetic, load_dataset, LabelSet, RoadDataset, SyntheticData};
pub use encoder::{mean_pool, negative_sgc, sgc_forward, EmbeddingMatrix, ModelParams};
pub use error::{GarnerError, Result};
pub use evaluate::{eval_function, eval_retrieval, eval_traffic, EvalReport};
pub use graph::{
    dirichlet_energy, laplacian, normalize_adjacency, spmm, DenseMatrix, SparseGraph,
};
pub use objective::{loss_and_gradients, LossBreakdown};
pub use trainer::{embed, train, TrainConfig, TrainLog};
