use super::layers::log_softmax;
use super::{NnError, Tensor};

/// Mean negative log-likelihood over rows where `mask` is true, with the
/// gradient with respect to `logits`. With no counted rows the loss is 0
/// and the gradient is zero.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<(f64, Tensor), NnError> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n || mask.len() != n {
        return Err(NnError::ShapeMismatch {
            context: "cross_entropy targets".into(),
            expected: format!("{n} targets and mask entries"),
            found: format!("{} targets, {} mask entries", targets.len(), mask.len()),
        });
    }
    if let Some(&bad) = targets.iter().zip(mask).find(|(t, m)| **m && **t >= v).map(|(t, _)| t) {
        return Err(NnError::ShapeMismatch {
            context: "cross_entropy target id".into(),
            expected: format!("id < {v}"),
            found: bad.to_string(),
        });
    }
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = Tensor::zeros(&[n, v]);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let lp = log_softmax(logits.row(i));
        loss -= lp[targets[i]];
        let g = grad.row_mut(i);
        for (gj, l) in g.iter_mut().zip(&lp) {
            *gj = l.exp() * inv;
        }
        g[targets[i]] -= inv;
    }
    Ok((loss * inv, grad))
}
