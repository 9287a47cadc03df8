//! Knowledge-graph structure encoders: train an embedding model on the
//! triple graph alone and export its entity table as the structural features.

mod model;
mod projection;
mod table;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{score_grad_rows, score_rows, KgeModel, ModelKind, ScoreGrad};
pub use projection::{orthonormal_projection, project_to_dim, ProjectionKind, ProjectionReport};
pub use table::{export_table, import_table, ImportCheck, StructuralEmbeddingTable};
pub use train::{evaluate_structure, train_structure_encoder, TrainedStructure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureEncoderConfig {
    pub kind: ModelKind,
    pub dim: usize,
    /// Margin γ of the TransE / HAKE loss.
    pub margin: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Self-adversarial temperature; 0 weights negatives uniformly.
    pub adversarial_temperature: f64,
    /// Weight λ_p of the HAKE phase distance.
    pub phase_weight: f64,
    /// L2 penalty on the rows touched by a DistMult batch.
    pub regularization: f64,
    pub seed: u64,
}

impl Default for StructureEncoderConfig {
    fn default() -> Self {
        StructureEncoderConfig {
            kind: ModelKind::Hake,
            dim: 16,
            margin: 6.0,
            negatives: 16,
            epochs: 60,
            batch_size: 64,
            learning_rate: 0.05,
            adversarial_temperature: 1.0,
            phase_weight: 0.5,
            regularization: 1e-4,
            seed: 0,
        }
    }
}

impl StructureEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("structure dim must be >= 1".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("negatives must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.kind != ModelKind::DistMult && !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0 for {}", self.kind)));
        }
        if !(self.learning_rate >= 0.0) || !(self.adversarial_temperature >= 0.0) {
            return Err(Error::Config("learning rate and temperature must be >= 0".into()));
        }
        Ok(())
    }
}
