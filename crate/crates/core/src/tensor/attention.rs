use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `softmax(Q Kᵀ / √d + mask) V`, recorded on `tape`.
///
/// `mask`, when given, is an additive `queries x keys` matrix (use a large
/// negative value to block a position).
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let d = tape.value(q).cols();
    if d == 0 || tape.value(k).cols() != d || tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::dim("attention", tape.value(q).shape(), tape.value(k).shape()));
    }
    let scores = tape.matmul_t(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    if let Some(mask) = mask {
        let m = tape.input(mask.clone())?;
        scores = tape.add(scores, m)?;
    }
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

/// Value-only attention, for callers that do not need gradients.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.input(q.clone())?, tape.input(k.clone())?, tape.input(v.clone())?);
    let out = scaled_dot_attention(&mut tape, qv, kv, vv, mask)?;
    Ok(tape.value(out).clone())
}
