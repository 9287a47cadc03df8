use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named parameters with gradient buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

const CHECKPOINT_MAGIC: &str = "MKGR-PARAMS 1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::new(value.shape().to_vec(), vec![0.0; value.len()])
            .expect("shape of an existing tensor");
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grad` into the gradient buffer of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor, scale: f64) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != grad.shape() && p.grad.len() != grad.len() {
            return Err(Error::dim("accumulate_grad", p.grad.shape(), grad.shape()));
        }
        for (g, &d) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += scale * d;
        }
        Ok(())
    }

    pub fn num_elements(&self, trainable: Option<bool>) -> usize {
        self.params
            .iter()
            .filter(|p| trainable.is_none_or(|t| p.trainable == t))
            .map(|p| p.value.len())
            .sum()
    }

    /// Writes every parameter as a named block: a text header line
    /// `name trainable rank d0 .. dk` followed by the little-endian `f64`
    /// payload. Loading restores the values bit for bit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "{}", self.params.len())?;
        for p in &self.params {
            if p.name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("parameter name `{}` has whitespace", p.name)));
            }
            write!(out, "{} {} {}", p.name, u8::from(p.trainable), p.value.shape().len())?;
            for d in p.value.shape() {
                write!(out, " {d}")?;
            }
            writeln!(out)?;
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut line = String::new();
        let mut next_line = |reader: &mut BufReader<fs::File>| -> Result<String> {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated checkpoint".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut reader)? != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("{} is not a parameter checkpoint", path.display())));
        }
        let count: usize = next_line(&mut reader)?
            .parse()
            .map_err(|_| Error::Format("bad block count".into()))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let header = next_line(&mut reader)?;
            let fields: Vec<&str> = header.split(' ').collect();
            let bad = || Error::Format(format!("bad block header `{header}`"));
            if fields.len() < 3 {
                return Err(bad());
            }
            let trainable = match fields[1] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            let rank: usize = fields[2].parse().map_err(|_| bad())?;
            if fields.len() != 3 + rank {
                return Err(bad());
            }
            let shape = fields[3..]
                .iter()
                .map(|f| f.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            reader
                .read_exact(&mut bytes)
                .map_err(|_| Error::Format(format!("truncated payload for `{}`", fields[0])))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(fields[0], Tensor::new(shape, data)?, trainable);
        }
        Ok(store)
    }

    /// Copies values from `other` into `self`, matching by name and shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint block `{}` {:?} does not match `{}` {:?}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_rows(&[vec![0.1, -1e-300], vec![f64::MIN_POSITIVE, 3.0]]).unwrap(), true);
        store.add("frozen", Tensor::new(vec![3], vec![1.0 / 3.0, 2.0, -0.0]).unwrap(), false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in store.params.iter().zip(&loaded.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(4, 4), true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        store.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn element_counts_split_by_trainability() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(2, 3), true);
        store.add("b", Tensor::zeros(5, 1), false);
        assert_eq!(store.num_elements(Some(true)), 6);
        assert_eq!(store.num_elements(Some(false)), 5);
        assert_eq!(store.num_elements(None), 11);
    }
}
