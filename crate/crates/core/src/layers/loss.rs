//! Softmax cross-entropy, the classification head of every experiment.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean-over-batch cross entropy with max-subtraction stabilisation.
///
/// Returns the scalar loss and the gradient w.r.t. the logits; the gradient
/// carries the 1/B mean factor, so the per-parameter update a training step
/// produces is the mean of the per-sample updates.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::domain(
            "softmax_cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let (bsz, classes) = (logits.rows(), logits.cols());
    let mut g = Tensor::zeros(&[bsz, classes]);
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let row = logits.row(b);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for &v in row {
            z += (v - max).exp();
        }
        loss += z.ln() - (row[y] - max);
        let gr = &mut g.data_mut()[b * classes..(b + 1) * classes];
        for (j, &v) in row.iter().enumerate() {
            gr[j] = (v - max).exp() / z / bsz as f64;
        }
        gr[y] -= 1.0 / bsz as f64;
    }
    loss /= bsz as f64;
    g.ensure_finite("softmax_cross_entropy")?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "softmax_cross_entropy" });
    }
    Ok((loss, g))
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|b| {
            let row = logits.row(b);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
