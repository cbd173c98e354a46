use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Projection weights of one multi-head attention module, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Result of one multi-head attention call.
#[derive(Debug, Clone)]
pub struct Attention {
    /// Output, `queries.rows × D`.
    pub out: Var,
    /// Post-softmax weights averaged over heads, `queries.rows × keys.rows`.
    pub weights: Var,
    /// Scaled pre-softmax scores of each head.
    pub scores: Vec<Var>,
}

/// Scaled dot-product multi-head attention of `queries` over `keys`/`values`.
pub fn cross_attention<S: Scalar>(
    tape: &mut Tape<S>,
    queries: Var,
    keys: Var,
    values: Var,
    p: &AttnParams,
    heads: usize,
) -> Result<Attention> {
    let d = tape.value(p.wq).cols();
    if tape.value(keys).rows() != tape.value(values).rows() {
        return Err(Error::Shape(format!(
            "{} keys vs {} values",
            tape.value(keys).rows(),
            tape.value(values).rows()
        )));
    }
    for v in [queries, keys, values] {
        if tape.value(v).cols() != tape.value(p.wq).rows() {
            return Err(Error::Shape(format!(
                "input width {} vs projection {}",
                tape.value(v).cols(),
                tape.value(p.wq).rows()
            )));
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("{heads} heads do not divide width {d}")));
    }
    let dk = d / heads;
    let q = tape.linear(queries, p.wq, p.bq);
    let k = tape.linear(keys, p.wk, p.bk);
    let v = tape.linear(values, p.wv, p.bv);
    let scale = S::one() / S::of_usize(dk).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    let mut all_scores = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk),
                tape.slice_cols(k, h * dk, dk),
                tape.slice_cols(v, h * dk, dk),
            )
        };
        let scores = tape.matmul_bt(qh, kh);
        let scores = tape.scale(scores, scale);
        all_scores.push(scores);
        let a = tape.softmax_rows(scores);
        outs.push(tape.matmul(a, vh));
        weights.push(a);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    let out = tape.linear(merged, p.wo, p.bo);
    let avg = if heads == 1 {
        weights[0]
    } else {
        tape.mean_of(&weights)
    };
    Ok(Attention {
        out,
        weights: avg,
        scores: all_scores,
    })
}

/// Head-averaged weights transposed to `keys.rows × queries.rows` with each
/// row renormalized over queries.
///
/// Works from log-weights: a joint softmax over (head, query) summed over
/// heads. Rows whose weights all underflow stay well defined.
pub fn transposed_renormalized<S: Scalar>(tape: &mut Tape<S>, scores: &[Var]) -> Var {
    let queries = tape.value(scores[0]).rows();
    let parts: Vec<Var> = scores
        .iter()
        .map(|&s| {
            let l = tape.log_softmax_rows(s);
            tape.transpose(l)
        })
        .collect();
    if parts.len() == 1 {
        return tape.softmax_rows(parts[0]);
    }
    let joint = tape.concat_cols(&parts);
    let joint = tape.softmax_rows(joint);
    let per_head: Vec<(Var, S)> = (0..parts.len())
        .map(|h| (tape.slice_cols(joint, h * queries, queries), S::one()))
        .collect();
    tape.weighted_sum(&per_head)
}
