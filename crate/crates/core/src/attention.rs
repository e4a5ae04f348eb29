//! Dense and mask-restricted attention, plus the metrics used to compare
//! selection policies.

use crate::error::{Error, Result};
use crate::retrieval::{select_token_oracle, RetrievalBudget};
use crate::types::{dot_unchecked, HeadVector, KvCache, SelectionMask};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub out: HeadVector,
    /// Softmax weight of every selected token, ascending by token.
    pub weights: Vec<(usize, f64)>,
}

/// In-place softmax with max-subtraction.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
}

/// softmax(q·K_S / √d_h) · V_S over the tokens in `mask`.
pub fn sparse_attend(q: &[f32], cache: &KvCache, mask: &SelectionMask) -> Result<AttentionOutput> {
    if mask.is_empty() {
        return Err(Error::EmptySelection);
    }
    let d = cache.d_h();
    if q.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: q.len(),
        });
    }
    mask.validate(cache.len())?;

    let scale = 1.0 / (d as f64).sqrt();
    let mut weights: Vec<f64> = mask
        .iter()
        .map(|i| f64::from(dot_unchecked(q, cache.key(i))) * scale)
        .collect();
    softmax_in_place(&mut weights);

    let mut out = vec![0.0f64; d];
    for (i, &w) in mask.iter().zip(&weights) {
        for (o, &v) in out.iter_mut().zip(cache.value(i)) {
            *o += w * f64::from(v);
        }
    }
    Ok(AttentionOutput {
        out: HeadVector::new(out.into_iter().map(|x| x as f32).collect())?,
        weights: mask.iter().zip(weights).collect(),
    })
}

pub fn dense_attend(q: &[f32], cache: &KvCache) -> Result<AttentionOutput> {
    sparse_attend(q, cache, &SelectionMask::all(cache.len()))
}

/// Fraction of the exact top-B tokens (by attention weight) that `mask`
/// retrieved: `|mask ∩ top_B| / B`.
pub fn recall_rate(
    mask: &SelectionMask,
    q: &[f32],
    cache: &KvCache,
    budget: RetrievalBudget,
) -> Result<f64> {
    let b = budget.tokens();
    if cache.len() < b {
        return Err(Error::Parameter(format!(
            "recall needs at least B = {b} cached tokens, have {}",
            cache.len()
        )));
    }
    // softmax is monotone, so ranking by logit ranks by weight
    let top = select_token_oracle(q, cache, budget)?;
    Ok(recall_against(mask, &top))
}

/// Recall of `mask` against a precomputed top-B set.
pub fn recall_against(mask: &SelectionMask, top: &SelectionMask) -> f64 {
    if top.is_empty() {
        return 1.0;
    }
    mask.intersection_len(top) as f64 / top.len() as f64
}

/// ‖a.out − b.out‖₂.
pub fn output_error(a: &AttentionOutput, b: &AttentionOutput) -> Result<f64> {
    if a.out.dim() != b.out.dim() {
        return Err(Error::Dimension {
            expected: a.out.dim(),
            actual: b.out.dim(),
        });
    }
    Ok(a.out
        .iter()
        .zip(b.out.iter())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt())
}
