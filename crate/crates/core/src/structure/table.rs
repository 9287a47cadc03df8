use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{KgeModel, ModelKind, StructureEncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The structural feature matrix handed to the fusion module, plus the raw
/// embedding model it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralEmbeddingTable {
    /// `N x D` rows consumed by fusion.
    pub matrix: Tensor,
    pub model: KgeModel,
    /// `raw_width x D` map applied to the raw entity rows, if projected.
    pub projection: Option<Tensor>,
    pub seed: u64,
    pub config_hash: String,
}

impl StructuralEmbeddingTable {
    pub fn from_model(model: KgeModel, cfg: &StructureEncoderConfig) -> Self {
        StructuralEmbeddingTable {
            matrix: model.entities.clone(),
            model,
            projection: None,
            seed: cfg.seed,
            config_hash: crate::config_hash(cfg),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, e: usize) -> Tensor {
        Tensor::row(self.matrix.row_slice(e).to_vec())
    }
}

/// What an importer expects of a table file.
#[derive(Clone, Debug, Default)]
pub struct ImportCheck {
    pub num_entities: Option<usize>,
    pub config_hash: Option<String>,
}

const MAGIC: &str = "MKGR-STRUCTURE 1";

fn write_block(out: &mut String, name: &str, t: &Tensor) {
    writeln!(out, "[{name} {} {}]", t.rows(), t.cols()).unwrap();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
}

/// Writes the table as text. The header records the model kind, N, D, seed
/// and configuration hash; floats use shortest round-trip formatting.
pub fn export_table(table: &StructuralEmbeddingTable, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "kind {}", table.model.kind).unwrap();
    writeln!(out, "entities {}", table.num_entities()).unwrap();
    writeln!(out, "dim {}", table.dim()).unwrap();
    writeln!(out, "model_dim {}", table.model.dim).unwrap();
    writeln!(out, "phase_weight {:?}", table.model.phase_weight).unwrap();
    writeln!(out, "seed {}", table.seed).unwrap();
    writeln!(out, "config_hash {}", table.config_hash).unwrap();
    write_block(&mut out, "matrix", &table.matrix);
    write_block(&mut out, "raw_entities", &table.model.entities);
    write_block(&mut out, "raw_relations", &table.model.relations);
    if let Some(p) = &table.projection {
        write_block(&mut out, "projection", p);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a table written by [`export_table`]. A wrong entity count is an
/// error; a differing configuration hash only produces a warning, returned
/// alongside the table.
pub fn import_table(path: &Path, check: &ImportCheck) -> Result<(StructuralEmbeddingTable, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().peekable();
    let fmt_err = |line: usize, msg: &str| Error::parse(path, line + 1, msg.to_string());
    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => return Err(Error::Format(format!("{} is not a structure table", path.display()))),
    }
    let mut header = std::collections::HashMap::new();
    while let Some(&(i, line)) = lines.peek() {
        if line.starts_with('[') {
            break;
        }
        let (k, v) = line.split_once(' ').ok_or_else(|| fmt_err(i, "expected `key value`"))?;
        header.insert(k.to_string(), v.to_string());
        lines.next();
    }
    let get = |k: &str| {
        header
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Format(format!("table header lacks `{k}`")))
    };
    let parse_usize = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Format(format!("bad `{k}`"))) };
    let kind = ModelKind::parse(&get("kind")?).ok_or_else(|| Error::Format("unknown model kind".into()))?;
    let entities = parse_usize("entities")?;
    let dim = parse_usize("dim")?;
    let model_dim = parse_usize("model_dim")?;
    let seed: u64 = get("seed")?.parse().map_err(|_| Error::Format("bad `seed`".into()))?;
    let phase_weight: f64 = get("phase_weight")?
        .parse()
        .map_err(|_| Error::Format("bad `phase_weight`".into()))?;
    let config_hash = get("config_hash")?;

    let mut blocks = std::collections::HashMap::new();
    while let Some((i, line)) = lines.next() {
        let inner = line
            .strip_prefix('[')
            .and_then(|l| l.strip_suffix(']'))
            .ok_or_else(|| fmt_err(i, "expected `[name rows cols]`"))?;
        let parts: Vec<&str> = inner.split(' ').collect();
        let [name, rows, cols] = parts[..] else {
            return Err(fmt_err(i, "expected `[name rows cols]`"));
        };
        let rows: usize = rows.parse().map_err(|_| fmt_err(i, "bad row count"))?;
        let cols: usize = cols.parse().map_err(|_| fmt_err(i, "bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (j, row) = lines.next().ok_or_else(|| fmt_err(i, "truncated block"))?;
            let before = data.len();
            for v in row.split_whitespace() {
                data.push(v.parse::<f64>().map_err(|_| fmt_err(j, "bad float"))?);
            }
            if data.len() - before != cols {
                return Err(fmt_err(j, "wrong number of values"));
            }
        }
        blocks.insert(name.to_string(), Tensor::from_matrix(rows, cols, data)?);
    }
    let mut take = |name: &str| {
        blocks
            .remove(name)
            .ok_or_else(|| Error::Format(format!("table lacks `{name}` block")))
    };
    let matrix = take("matrix")?;
    let raw_entities = take("raw_entities")?;
    let raw_relations = take("raw_relations")?;
    let projection = blocks.remove("projection");
    if matrix.rows() != entities || matrix.cols() != dim || raw_entities.rows() != entities {
        return Err(Error::Format(format!(
            "header says {entities} x {dim} but matrix is {:?}",
            matrix.shape()
        )));
    }
    if raw_entities.cols() != kind.row_width(model_dim) || raw_relations.cols() != kind.row_width(model_dim) {
        return Err(Error::Format("raw tables do not match the model dimension".into()));
    }
    if let Some(expected) = check.num_entities {
        if expected != entities {
            return Err(Error::Format(format!(
                "table has {entities} entities but the dataset has {expected}"
            )));
        }
    }
    let mut warnings = Vec::new();
    if let Some(expected) = &check.config_hash {
        if *expected != config_hash {
            let msg = format!("structure table was trained with config {config_hash}, current config is {expected}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let table = StructuralEmbeddingTable {
        matrix,
        model: KgeModel {
            kind,
            dim: model_dim,
            phase_weight,
            entities: raw_entities,
            relations: raw_relations,
        },
        projection,
        seed,
        config_hash,
    };
    Ok((table, warnings))
}
