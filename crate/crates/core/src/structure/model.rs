//! Scoring functions and their analytic gradients.
//!
//! Higher scores mean more plausible triples:
//!
//! * TransE:   `−‖h + r − t‖₂`
//! * DistMult: `Σ h ∘ r ∘ t`
//! * HAKE:     `−(‖h_m ∘ r_m − t_m‖₂ + λ_p ‖sin((h_p + r_p − t_p) / 2)‖₁)`
//!
//! HAKE rows store the modulus half first and the phase half second, so a
//! HAKE model with dimension `d` has `2d`-wide entity and relation rows.

use serde::{Deserialize, Serialize};

use crate::data::{EntityId, RelationId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    TransE,
    DistMult,
    Hake,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TransE => "transe",
            ModelKind::DistMult => "distmult",
            ModelKind::Hake => "hake",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "transe" => Some(ModelKind::TransE),
            "distmult" => Some(ModelKind::DistMult),
            "hake" => Some(ModelKind::Hake),
            _ => None,
        }
    }

    /// Width of stored rows for an embedding dimension `d`.
    pub fn row_width(self, d: usize) -> usize {
        match self {
            ModelKind::Hake => 2 * d,
            _ => d,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Entity and relation tables of a trained (or initialised) embedding model.
#[derive(Clone, Debug, PartialEq)]
pub struct KgeModel {
    pub kind: ModelKind,
    pub dim: usize,
    pub phase_weight: f64,
    pub entities: Tensor,
    pub relations: Tensor,
}

/// Gradient of one score with respect to the three rows involved.
pub struct ScoreGrad {
    pub score: f64,
    pub head: Vec<f64>,
    pub relation: Vec<f64>,
    pub tail: Vec<f64>,
}

impl KgeModel {
    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn score(&self, h: EntityId, r: RelationId, t: EntityId) -> f64 {
        score_rows(
            self.kind,
            self.dim,
            self.phase_weight,
            self.entities.row_slice(h.0),
            self.relations.row_slice(r.0),
            self.entities.row_slice(t.0),
        )
    }

    pub fn score_grad(&self, h: EntityId, r: RelationId, t: EntityId) -> ScoreGrad {
        score_grad_rows(
            self.kind,
            self.dim,
            self.phase_weight,
            self.entities.row_slice(h.0),
            self.relations.row_slice(r.0),
            self.entities.row_slice(t.0),
        )
    }

    /// Scores of `(h, r, e)` for every entity `e`.
    pub fn tail_scores(&self, h: EntityId, r: RelationId) -> Vec<f64> {
        (0..self.num_entities())
            .map(|t| self.score(h, r, EntityId(t)))
            .collect()
    }

    /// Scores of `(e, r, t)` for every entity `e`.
    pub fn head_scores(&self, r: RelationId, t: EntityId) -> Vec<f64> {
        (0..self.num_entities())
            .map(|h| self.score(EntityId(h), r, t))
            .collect()
    }
}

pub fn score_rows(kind: ModelKind, d: usize, phase_weight: f64, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    match kind {
        ModelKind::TransE => {
            let sq: f64 = (0..d).map(|i| (h[i] + r[i] - t[i]).powi(2)).sum();
            -sq.sqrt()
        }
        ModelKind::DistMult => (0..d).map(|i| h[i] * r[i] * t[i]).sum(),
        ModelKind::Hake => {
            let modulus: f64 = (0..d).map(|i| (h[i] * r[i] - t[i]).powi(2)).sum::<f64>().sqrt();
            let phase: f64 = (d..2 * d).map(|i| ((h[i] + r[i] - t[i]) / 2.0).sin().abs()).sum();
            -(modulus + phase_weight * phase)
        }
    }
}

pub fn score_grad_rows(kind: ModelKind, d: usize, phase_weight: f64, h: &[f64], r: &[f64], t: &[f64]) -> ScoreGrad {
    let w = kind.row_width(d);
    let mut gh = vec![0.0; w];
    let mut gr = vec![0.0; w];
    let mut gt = vec![0.0; w];
    let score = match kind {
        ModelKind::TransE => {
            let diff: Vec<f64> = (0..d).map(|i| h[i] + r[i] - t[i]).collect();
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for i in 0..d {
                    let g = -diff[i] / norm;
                    gh[i] = g;
                    gr[i] = g;
                    gt[i] = -g;
                }
            }
            -norm
        }
        ModelKind::DistMult => {
            for i in 0..d {
                gh[i] = r[i] * t[i];
                gr[i] = h[i] * t[i];
                gt[i] = h[i] * r[i];
            }
            (0..d).map(|i| h[i] * r[i] * t[i]).sum()
        }
        ModelKind::Hake => {
            let diff: Vec<f64> = (0..d).map(|i| h[i] * r[i] - t[i]).collect();
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for i in 0..d {
                    let g = -diff[i] / norm;
                    gh[i] = g * r[i];
                    gr[i] = g * h[i];
                    gt[i] = -g;
                }
            }
            let mut phase = 0.0;
            for i in d..2 * d {
                let half = (h[i] + r[i] - t[i]) / 2.0;
                let s = half.sin();
                phase += s.abs();
                // d|sin(x/2)|/dx = sign(sin(x/2)) cos(x/2) / 2
                let g = -phase_weight * s.signum() * half.cos() / 2.0;
                let g = if s == 0.0 { 0.0 } else { g };
                gh[i] = g;
                gr[i] = g;
                gt[i] = -g;
            }
            -(norm + phase_weight * phase)
        }
    };
    ScoreGrad {
        score,
        head: gh,
        relation: gr,
        tail: gt,
    }
}
