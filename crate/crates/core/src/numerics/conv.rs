//! 2-D cross-correlation through per-example im2col.

use rayon::prelude::*;

use super::{LayerGrad, Scalar, Tensor};
use crate::error::{Error, Result};

// Examples per backward work unit. Fixed so the reduction order never depends
// on the thread count.
const BACKWARD_CHUNK: usize = 8;

/// Output extent of a convolution along one spatial axis (floor semantics).
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim("conv stride must be >= 1"));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::dim(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, Self)> {
        let (batch, channels, height, width) = match x {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => return Err(Error::dim(format!("conv input must be 4-D, got {s:?}"))),
        };
        let (outputs, kc, kh, kw) = match k {
            [o, c, h, w] => (*o, *c, *h, *w),
            s => return Err(Error::dim(format!("conv kernel must be 4-D, got {s:?}"))),
        };
        if kc != channels {
            return Err(Error::dim(format!(
                "conv kernel expects {kc} channels, input has {channels}"
            )));
        }
        let out_h = conv_output_size(height, kh, stride, pad)?;
        let out_w = conv_output_size(width, kw, stride, pad)?;
        Ok((
            batch,
            outputs,
            Self {
                channels,
                height,
                width,
                kh,
                kw,
                out_h,
                out_w,
                stride,
                pad,
            },
        ))
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Calls `f(col_row, col_pos, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.positions();
        for c in 0..self.channels {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = (c * self.height + iy as usize) * self.width + ix as usize;
                            f(row * p, oy * self.out_w + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, image: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.patch() * self.positions()];
        self.for_each_tap(|base, pos, src| cols[base + pos] = image[src]);
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        self.for_each_tap(|base, pos, src| image[src] = image[src] + cols[base + pos]);
    }
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Zero-padded cross-correlation; `bias` is added per output channel.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (batch, outputs, geo) = Geometry::new(x.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != outputs {
            return Err(Error::dim(format!(
                "conv bias length {} vs {outputs} outputs",
                b.len()
            )));
        }
    }
    let patch = geo.patch();
    let positions = geo.positions();
    let image = geo.image();
    let kd = kernel.data();
    let xd = x.data();
    let mut y = Tensor::zeros(&[batch, outputs, geo.out_h, geo.out_w]);
    y.data_mut()
        .par_chunks_mut(outputs * positions)
        .enumerate()
        .for_each(|(b, out)| {
            let cols = geo.im2col(&xd[b * image..(b + 1) * image]);
            for o in 0..outputs {
                let dst = &mut out[o * positions..(o + 1) * positions];
                if let Some(bias) = bias {
                    dst.fill(bias.data()[o]);
                }
                for k in 0..patch {
                    let w = kd[o * patch + k];
                    if w != T::zero() {
                        axpy(w, &cols[k * positions..(k + 1) * positions], dst);
                    }
                }
            }
        });
    y.ensure_finite("conv2d_forward")
}

/// Gradients of [`conv2d_forward`]; the bias gradient is always returned.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    d_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<LayerGrad<T>> {
    let (batch, outputs, geo) = Geometry::new(x.shape(), kernel.shape(), stride, pad)?;
    if d_out.shape() != [batch, outputs, geo.out_h, geo.out_w] {
        return Err(Error::dim(format!(
            "conv backward: d_out {:?}, expected {:?}",
            d_out.shape(),
            [batch, outputs, geo.out_h, geo.out_w]
        )));
    }
    let patch = geo.patch();
    let positions = geo.positions();
    let image = geo.image();
    let kd = kernel.data();
    let xd = x.data();
    let gd = d_out.data();

    let mut d_x = Tensor::zeros(x.shape());
    let partials: Vec<Vec<T>> = d_x
        .data_mut()
        .par_chunks_mut(image * BACKWARD_CHUNK)
        .enumerate()
        .map(|(chunk, dx_chunk)| {
            let mut dw = vec![T::zero(); outputs * patch];
            for (local, dx) in dx_chunk.chunks_mut(image).enumerate() {
                let b = chunk * BACKWARD_CHUNK + local;
                let cols = geo.im2col(&xd[b * image..(b + 1) * image]);
                let g = &gd[b * outputs * positions..(b + 1) * outputs * positions];
                let mut d_cols = vec![T::zero(); patch * positions];
                for o in 0..outputs {
                    let go = &g[o * positions..(o + 1) * positions];
                    for k in 0..patch {
                        let colk = &cols[k * positions..(k + 1) * positions];
                        let acc = go
                            .iter()
                            .zip(colk)
                            .fold(T::zero(), |a, (&u, &v)| a + u * v);
                        dw[o * patch + k] = dw[o * patch + k] + acc;
                        let w = kd[o * patch + k];
                        if w != T::zero() {
                            axpy(w, go, &mut d_cols[k * positions..(k + 1) * positions]);
                        }
                    }
                }
                geo.col2im(&d_cols, dx);
            }
            dw
        })
        .collect();

    let mut d_w = Tensor::zeros(kernel.shape());
    for part in &partials {
        axpy(T::one(), part, d_w.data_mut());
    }
    let mut d_b = Tensor::zeros(&[outputs]);
    for b in 0..batch {
        for o in 0..outputs {
            let s: T = gd[(b * outputs + o) * positions..(b * outputs + o + 1) * positions]
                .iter()
                .copied()
                .sum();
            d_b.data_mut()[o] = d_b.data()[o] + s;
        }
    }
    Ok(LayerGrad {
        d_weights: d_w.ensure_finite("conv2d_backward")?,
        d_bias: Some(d_b),
        d_input: d_x.ensure_finite("conv2d_backward")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_1x1_kernel_copies_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 4, 5], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 3, 5, 5], &mut rng);
        let y = conv2d_forward(&x, &Tensor::zeros(&[4, 3, 3, 3]), None, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_kernel_on_ones_input_sums_to_nine() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn output_size_floors_and_rejects_oversized_kernels() {
        assert_eq!(conv_output_size(32, 3, 2, 1).unwrap(), 16);
        assert_eq!(conv_output_size(8, 3, 1, 1).unwrap(), 8);
        assert!(conv_output_size(2, 5, 1, 1).is_err());
        assert!(conv_output_size(4, 3, 0, 1).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 2, 4, 4], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let g = conv2d_backward(&x, &k, &Tensor::zeros(&[2, 3, 4, 4]), 1, 1).unwrap();
        assert!(g.d_weights.data().iter().all(|&v| v == 0.0));
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_grad_on_constant_input_is_summed_upstream_per_tap() {
        // No padding: every tap sees the constant c, so dK[o,ch,i,j] = c * sum(d_out[o]).
        let c = 1.5;
        let x = Tensor::<f64>::full(&[2, 2, 5, 5], c);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let d_out = random(&[2, 3, 3, 3], &mut rng);
        let g = conv2d_backward(&x, &k, &d_out, 1, 0).unwrap();
        for o in 0..3 {
            let mut total = 0.0;
            for b in 0..2 {
                total += d_out.data()[(b * 3 + o) * 9..(b * 3 + o + 1) * 9].iter().sum::<f64>();
            }
            for tap in 0..18 {
                let got = g.d_weights.data()[o * 18 + tap];
                assert!((got - c * total).abs() < 1e-12, "{got} vs {}", c * total);
            }
        }
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
            let x = random(&[1, 2, 4, 4], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let y = conv2d_forward(&x, &k, Some(&b), stride, pad).unwrap();
            let probe = random(y.shape(), &mut rng);
            let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
                conv2d_forward(x, k, Some(b), stride, pad).unwrap().dot(&probe)
            };
            let g = conv2d_backward(&x, &k, &probe, stride, pad).unwrap();
            let fd_k = finite_difference_gradient(
                |p| loss(&x, &Tensor::new(k.shape().to_vec(), p.to_vec()).unwrap(), &b),
                k.data(),
                1e-5,
            )
            .unwrap();
            let fd_x = finite_difference_gradient(
                |p| loss(&Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap(), &k, &b),
                x.data(),
                1e-5,
            )
            .unwrap();
            let fd_b = finite_difference_gradient(
                |p| loss(&x, &k, &Tensor::new(vec![3], p.to_vec()).unwrap()),
                b.data(),
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(g.d_weights.data(), &fd_k) < 1e-5);
            assert!(max_relative_error(g.d_input.data(), &fd_x) < 1e-5);
            assert!(max_relative_error(g.d_bias.as_ref().unwrap().data(), &fd_b) < 1e-5);
        }
    }

    #[test]
    fn backward_is_deterministic_across_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f32>::from_fn(&[21, 3, 6, 6], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::<f32>::from_fn(&[4, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        let d = Tensor::<f32>::from_fn(&[21, 4, 6, 6], |_| rng.random_range(-1.0..1.0));
        let a = conv2d_backward(&x, &k, &d, 1, 1).unwrap();
        let b = conv2d_backward(&x, &k, &d, 1, 1).unwrap();
        assert_eq!(a.d_weights.data(), b.d_weights.data());
        assert_eq!(a.d_input.data(), b.d_input.data());
    }
}
