//! Central finite-difference check of analytic gradients.

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error: entries whose analytic and
    /// numeric gradients are both below it are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per parameter block (evenly strided).
    pub max_entries_per_block: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries_per_block: usize::MAX,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockError {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Compares analytic gradients with `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// `loss_fn` must return the loss at the store's current values and add its
/// analytic gradient into the store's gradient buffers. It is called once for
/// the analytic pass and twice per checked entry. Frozen parameters are not
/// perturbed and do not appear in the report. The store's values are restored
/// and its gradients zeroed before returning.
pub fn finite_diff_check<F>(store: &mut ParamStore, mut loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    store.zero_grad();
    let base = loss_fn(store)?;
    if !base.is_finite() {
        return Err(Error::GradCheck(format!("loss is not finite: {base}")));
    }
    let analytic: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();

    let mut blocks = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).value.len();
        let stride = n.div_ceil(opts.max_entries_per_block.max(1)).max(1);
        let mut block = BlockError {
            name: store.get(id).name.clone(),
            entries_checked: 0,
            max_rel_error: 0.0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in (0..n).step_by(stride) {
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + opts.epsilon;
            let plus = loss_fn(store)?;
            store.get_mut(id).value.data_mut()[i] = original - opts.epsilon;
            let minus = loss_fn(store)?;
            store.get_mut(id).value.data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck(format!("non-finite loss perturbing {}[{i}]", block.name)));
            }
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[id.index()].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            block.entries_checked += 1;
            if rel > block.max_rel_error {
                block.max_rel_error = rel;
                block.worst_analytic = a;
                block.worst_numeric = numeric;
            }
        }
        blocks.push(block);
    }
    store.zero_grad();
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, Tape};

    fn squared_norm(store: &mut ParamStore, id: ParamId) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(store, id);
        let sq = tape.mul(x, x)?;
        let loss = tape.sum(sq)?;
        let grads = tape.backward(loss)?;
        tape.accumulate_param_grads(&grads, store, 1.0)?;
        Ok(tape.value(loss).item())
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::row(vec![0.3, -1.7, 2.2, 5.0]), true);
        let report = finite_diff_check(&mut store, |s| squared_norm(s, id), GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{report:?}");
    }

    #[test]
    fn frozen_parameter_is_excluded() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::row(vec![1.0, 2.0]), true);
        store.add("frozen", Tensor::row(vec![4.0]), false);
        let report = finite_diff_check(&mut store, |s| squared_norm(s, id), GradCheckOptions::default()).unwrap();
        assert_eq!(report.blocks.len(), 1);
        assert_eq!(report.blocks[0].name, "theta");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::row(vec![1.0, 2.0]), true);
        let report = finite_diff_check(
            &mut store,
            |s| {
                let loss = squared_norm(s, id)?;
                s.accumulate_grad(id, &Tensor::row(vec![0.5, 0.0]), 1.0)?;
                Ok(loss)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::row(vec![1.0]), true);
        let err = finite_diff_check(&mut store, |_| Ok(f64::INFINITY), GradCheckOptions::default());
        assert!(matches!(err, Err(Error::GradCheck(_))));
    }
}
