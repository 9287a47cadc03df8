//! Structure-guided multimodal knowledge-graph reasoning at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors, a reverse-mode tape, Adam, and a
//!   finite-difference gradient checker.
//! * [`data`]: the multimodal KG model, file formats, vocabulary and
//!   masked-entity templates, and a synthetic dataset generator.
//! * [`structure`]: TransE / DistMult / HAKE structure encoders producing the
//!   frozen structural table.
//! * [`backbone`]: tiny text, vision and multimodal transformer encoders with
//!   a tied-embedding entity prediction head.
//! * [`fusion`]: weighted-summation and alignment-constraint fusion of the
//!   structural table into the backbone, and the training step.
//! * [`eval`]: filtered/raw ranking with Hits@k and mean rank.
//! * [`experiment`]: run configuration and the command implementations used
//!   by the CLI.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod structure;
pub mod tensor;
mod util;

pub use error::{Error, Result};
pub use util::config_hash;
