use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean cross-entropy of `softmax(logits)` against integer labels, with the
/// gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (batch, classes) = match logits.shape() {
        [b, k] => (*b, *k),
        s => return Err(Error::dim(format!("logits must be 2-D, got {s:?}"))),
    };
    if labels.len() != batch {
        return Err(Error::dim(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let inv_b = T::one() / T::of(batch as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        let mut z = T::zero();
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            z = z + *gi;
        }
        total = total + (z.ln() - (row[label] - max));
        for gi in g.iter_mut() {
            *gi = *gi / z * inv_b;
        }
        g[label] = g[label] - inv_b;
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, grad))
}
