use rayon::prelude::*;

use super::{LayerGrad, Scalar, Tensor};
use crate::error::{Error, Result};

// Below this many multiply-adds the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

fn check_2d<T: Scalar>(t: &Tensor<T>, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::dim(format!("{name} must be 2-D, got {s:?}"))),
    }
}

/// `y[b,o] = sum_i x[b,i] * w[o,i] + bias[o]`.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (batch, inputs) = check_2d(x, "dense input")?;
    let (outputs, w_in) = check_2d(w, "dense weight")?;
    if inputs != w_in {
        return Err(Error::dim(format!(
            "dense input width {inputs} vs weight width {w_in}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != outputs {
            return Err(Error::dim(format!(
                "dense bias length {} vs {outputs} outputs",
                b.len()
            )));
        }
    }
    let mut y = Tensor::zeros(&[batch, outputs]);
    let wd = w.data();
    let xd = x.data();
    let row = |(b, out): (usize, &mut [T])| {
        let xr = &xd[b * inputs..(b + 1) * inputs];
        for (o, v) in out.iter_mut().enumerate() {
            let mut acc = dot(xr, &wd[o * inputs..(o + 1) * inputs]);
            if let Some(bias) = bias {
                acc = acc + bias.data()[o];
            }
            *v = acc;
        }
    };
    if batch * inputs * outputs >= PAR_THRESHOLD {
        y.data_mut()
            .par_chunks_mut(outputs)
            .enumerate()
            .for_each(row);
    } else {
        y.data_mut().chunks_mut(outputs).enumerate().for_each(row);
    }
    y.ensure_finite("dense_forward")
}

/// Gradients of [`dense_forward`]; the bias gradient is always returned.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let (batch, inputs) = check_2d(x, "dense input")?;
    let (outputs, w_in) = check_2d(w, "dense weight")?;
    let (db, dout) = check_2d(d_out, "dense output grad")?;
    if inputs != w_in || db != batch || dout != outputs {
        return Err(Error::dim(format!(
            "dense backward: x {:?}, w {:?}, d_out {:?}",
            x.shape(),
            w.shape(),
            d_out.shape()
        )));
    }
    let xd = x.data();
    let wd = w.data();
    let gd = d_out.data();
    let par = batch * inputs * outputs >= PAR_THRESHOLD;

    let mut d_w = Tensor::zeros(&[outputs, inputs]);
    let w_row = |(o, dw): (usize, &mut [T])| {
        for b in 0..batch {
            let g = gd[b * outputs + o];
            if g != T::zero() {
                axpy(g, &xd[b * inputs..(b + 1) * inputs], dw);
            }
        }
    };
    let mut d_x = Tensor::zeros(&[batch, inputs]);
    let x_row = |(b, dx): (usize, &mut [T])| {
        for o in 0..outputs {
            let g = gd[b * outputs + o];
            if g != T::zero() {
                axpy(g, &wd[o * inputs..(o + 1) * inputs], dx);
            }
        }
    };
    if par {
        d_w.data_mut().par_chunks_mut(inputs).enumerate().for_each(w_row);
        d_x.data_mut().par_chunks_mut(inputs).enumerate().for_each(x_row);
    } else {
        d_w.data_mut().chunks_mut(inputs).enumerate().for_each(w_row);
        d_x.data_mut().chunks_mut(inputs).enumerate().for_each(x_row);
    }

    let mut d_b = Tensor::zeros(&[outputs]);
    for b in 0..batch {
        axpy(T::one(), &gd[b * outputs..(b + 1) * outputs], d_b.data_mut());
    }

    Ok(LayerGrad {
        d_weights: d_w.ensure_finite("dense_backward")?,
        d_bias: Some(d_b),
        d_input: d_x.ensure_finite("dense_backward")?,
    })
}
