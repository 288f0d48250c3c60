use crate::codec::TokenId;
use crate::error::{Error, Result};
use crate::scorer::linalg::log_softmax;

fn check_shapes(logits: &[f64], vocab: usize, targets: &[TokenId], mask: &[bool]) -> Result<usize> {
    if vocab == 0 || logits.len() != targets.len() * vocab || targets.len() != mask.len() {
        return Err(Error::invalid(format!(
            "shape mismatch: {} logits, vocab {vocab}, {} targets, {} mask",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!("target {t} outside vocabulary")));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    Ok(count)
}

/// Mean of `-log softmax(logits[t])[targets[t]]` over positions with
/// `mask[t]`. `logits` is `targets.len() x vocab`, row-major.
pub fn masked_cross_entropy(
    logits: &[f64],
    vocab: usize,
    targets: &[TokenId],
    mask: &[bool],
) -> Result<f64> {
    let (sum, count, _) = masked_cross_entropy_sum(logits, vocab, targets, mask, false)?;
    Ok(sum / count as f64)
}

/// Summed loss, masked count, and (when `with_grad`) the gradient of the
/// summed loss with respect to the logits.
pub fn masked_cross_entropy_sum(
    logits: &[f64],
    vocab: usize,
    targets: &[TokenId],
    mask: &[bool],
    with_grad: bool,
) -> Result<(f64, usize, Vec<f64>)> {
    let count = check_shapes(logits, vocab, targets, mask)?;
    let mut grad = if with_grad {
        vec![0.0; logits.len()]
    } else {
        Vec::new()
    };
    let mut sum = 0.0;
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        let lp = log_softmax(row);
        sum -= lp[target as usize];
        if with_grad {
            let g = &mut grad[t * vocab..(t + 1) * vocab];
            for (gi, l) in g.iter_mut().zip(&lp) {
                *gi = l.exp();
            }
            g[target as usize] -= 1.0;
        }
    }
    Ok((sum, count, grad))
}

/// Squared error between the grade-head score and the MOS.
pub fn grade_head_loss(pred_score: f64, mos: f64) -> f64 {
    let d = pred_score - mos;
    d * d
}
