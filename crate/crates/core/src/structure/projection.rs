use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::StructuralEmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How raw structure rows are mapped to the transformer width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    /// Fixed seeded map with orthonormal rows or columns.
    Orthonormal,
    /// Same initial map, registered as a trainable parameter of the fused model.
    Trainable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionReport {
    pub identity: bool,
    /// max |⟨xW, yW⟩ − ⟨x, y⟩| over checked row pairs.
    pub gram_deviation: f64,
    pub pairs_checked: usize,
}

/// A seeded `rows x cols` matrix whose shorter side is orthonormal: columns
/// when `rows >= cols`, rows otherwise.
pub fn orthonormal_projection(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (count, len) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut vectors: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..len).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    // modified Gram-Schmidt, two passes
    for _ in 0..2 {
        for i in 0..count {
            for j in 0..i {
                let proj: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = vectors.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= proj * b;
                }
            }
            let norm = vectors[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            vectors[i].iter_mut().for_each(|v| *v /= norm);
        }
    }
    let t = Tensor::from_rows(&vectors).expect("rectangular");
    if rows >= cols {
        t.transpose()
    } else {
        t
    }
}

/// Maps the table to `d` columns with a seeded orthonormal map. Equal widths
/// pass through unchanged. Whether the map is later trained is decided by the
/// fused model ([`ProjectionKind`]).
pub fn project_to_dim(
    table: &StructuralEmbeddingTable,
    d: usize,
    seed: u64,
) -> Result<(StructuralEmbeddingTable, ProjectionReport)> {
    if d == 0 {
        return Err(Error::Config("projection dimension must be positive".into()));
    }
    let raw = &table.model.entities;
    if raw.cols() == d {
        let out = StructuralEmbeddingTable {
            matrix: raw.clone(),
            projection: None,
            ..table.clone()
        };
        let report = ProjectionReport {
            identity: true,
            gram_deviation: 0.0,
            pairs_checked: 0,
        };
        return Ok((out, report));
    }
    let w = orthonormal_projection(raw.cols(), d, seed);
    let matrix = raw.matmul(&w)?;
    let report = gram_report(raw, &matrix);
    Ok((
        StructuralEmbeddingTable {
            matrix,
            projection: Some(w),
            ..table.clone()
        },
        report,
    ))
}

fn gram_report(before: &Tensor, after: &Tensor) -> ProjectionReport {
    let n = before.rows().min(128);
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in i..n {
            let a: f64 = before.row_slice(i).iter().zip(before.row_slice(j)).map(|(x, y)| x * y).sum();
            let b: f64 = after.row_slice(i).iter().zip(after.row_slice(j)).map(|(x, y)| x * y).sum();
            worst = worst.max((a - b).abs());
            pairs += 1;
        }
    }
    ProjectionReport {
        identity: false,
        gram_deviation: worst,
        pairs_checked: pairs,
    }
}
