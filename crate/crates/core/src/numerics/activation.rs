use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
    y
}

/// Masks `d_out` wherever `x <= 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != d_out.shape() {
        return Err(Error::dim(format!(
            "relu backward: {:?} vs {:?}",
            x.shape(),
            d_out.shape()
        )));
    }
    let mut d = d_out.clone();
    for (g, &v) in d.data_mut().iter_mut().zip(x.data()) {
        if !(v > T::zero()) {
            *g = T::zero();
        }
    }
    Ok(d)
}
