//! Per-channel batch normalization over `[B, C]` or `[B, C, H, W]` inputs.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Everything the backward pass and the running-stat update need.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T = f32> {
    pub mode: BnMode,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, the value folded into the running estimate.
    pub batch_var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchNormCache<T> {
    /// `running <- (1 - m) * running + m * batch`; a no-op for eval-mode caches.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T]) {
        if self.mode == BnMode::Eval {
            return;
        }
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for c in 0..running_mean.len() {
            running_mean[c] = keep * running_mean[c] + m * self.batch_mean[c];
            running_var[c] = keep * running_var[c] + m * self.batch_var_unbiased[c];
        }
    }
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, h, w] => Ok((*b, *c, h * w)),
        s => Err(Error::dim(format!("batchnorm input must be 2-D or 4-D, got {s:?}"))),
    }
}

pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (batch, channels, spatial) = layout(x.shape())?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running mean", running_mean),
        ("running var", running_var),
    ] {
        if t.len() != channels {
            return Err(Error::dim(format!(
                "batchnorm {name} has {} entries for {channels} channels",
                t.len()
            )));
        }
    }
    let n = batch * spatial;
    let xd = x.data();
    let eps = T::of(BN_EPSILON);
    let index = |b: usize, c: usize, s: usize| (b * channels + c) * spatial + s;

    let mut mean = vec![T::zero(); channels];
    let mut var_unbiased = vec![T::zero(); channels];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        let (mu, var) = match mode {
            BnMode::Train => {
                let mut sum = T::zero();
                for b in 0..batch {
                    for s in 0..spatial {
                        sum = sum + xd[index(b, c, s)];
                    }
                }
                let mu = sum / T::of(n as f64);
                let mut sq = T::zero();
                for b in 0..batch {
                    for s in 0..spatial {
                        let d = xd[index(b, c, s)] - mu;
                        sq = sq + d * d;
                    }
                }
                let var = sq / T::of(n as f64);
                var_unbiased[c] = if n > 1 {
                    sq / T::of((n - 1) as f64)
                } else {
                    var
                };
                (mu, var)
            }
            BnMode::Eval => (running_mean.data()[c], running_var.data()[c]),
        };
        mean[c] = mu;
        inv_std[c] = T::one() / (var + eps).sqrt();
    }

    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..batch {
        for c in 0..channels {
            let (g, bt) = (gamma.data()[c], beta.data()[c]);
            for s in 0..spatial {
                let i = index(b, c, s);
                let h = (xd[i] - mean[c]) * inv_std[c];
                x_hat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + bt;
            }
        }
    }
    let y = y.ensure_finite("batchnorm_forward")?;
    Ok((
        y,
        BatchNormCache {
            mode,
            x_hat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
        },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if d_out.shape() != cache.x_hat.shape() {
        return Err(Error::dim(format!(
            "batchnorm backward: {:?} vs {:?}",
            d_out.shape(),
            cache.x_hat.shape()
        )));
    }
    let (batch, channels, spatial) = layout(d_out.shape())?;
    let n = T::of((batch * spatial) as f64);
    let index = |b: usize, c: usize, s: usize| (b * channels + c) * spatial + s;
    let gd = d_out.data();
    let xh = cache.x_hat.data();

    let mut d_gamma = Tensor::zeros(&[channels]);
    let mut d_beta = Tensor::zeros(&[channels]);
    let mut d_x = Tensor::zeros(d_out.shape());
    for c in 0..channels {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..batch {
            for s in 0..spatial {
                let i = index(b, c, s);
                sum_g = sum_g + gd[i];
                sum_gx = sum_gx + gd[i] * xh[i];
            }
        }
        d_beta.data_mut()[c] = sum_g;
        d_gamma.data_mut()[c] = sum_gx;
        let g = gamma.data()[c];
        let k = g * cache.inv_std[c];
        for b in 0..batch {
            for s in 0..spatial {
                let i = index(b, c, s);
                d_x.data_mut()[i] = match cache.mode {
                    BnMode::Train => k * (gd[i] - sum_g / n - xh[i] * sum_gx / n),
                    BnMode::Eval => k * gd[i],
                };
            }
        }
    }
    Ok((d_x.ensure_finite("batchnorm_backward")?, d_gamma, d_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::zeros(&[c]), Tensor::full(&[c], 1.0))
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::<f64>::full(&[4, 2, 3, 3], 7.0);
        let gamma = Tensor::new(vec![2], vec![2.0, -1.0]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let (rm, rv) = stats(2);
        let (y, _) = batchnorm_forward(&x, &gamma, &beta, &rm, &rv, BnMode::Train).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let c = (i / 9) % 2;
            assert_eq!(*v, beta.data()[c]);
        }
    }

    #[test]
    fn standardized_input_is_unchanged() {
        // Per-channel values {-a, a} with a chosen so the biased variance is 1 - eps.
        let a = (1.0f64 - BN_EPSILON).sqrt();
        let x = Tensor::<f64>::new(vec![2, 3], vec![-a, a, -a, a, -a, a]).unwrap();
        let (rm, rv) = stats(3);
        let (y, _) = batchnorm_forward(
            &x,
            &Tensor::full(&[3], 1.0),
            &Tensor::zeros(&[3]),
            &rm,
            &rv,
            BnMode::Train,
        )
        .unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let (mut rm, mut rv) = stats(1);
        let (_, cache) = batchnorm_forward(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &rm,
            &rv,
            BnMode::Train,
        )
        .unwrap();
        cache.update_running(rm.data_mut(), rv.data_mut());
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        // unbiased var of {1,3} is 2
        assert!((rv.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::<f64>::new(vec![1, 1], vec![3.0]).unwrap();
        let rm = Tensor::full(&[1], 1.0);
        let rv = Tensor::full(&[1], 4.0 - BN_EPSILON);
        let (y, _) = batchnorm_forward(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &rm,
            &rv,
            BnMode::Eval,
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let (rm, rv) = stats(2);
        assert!(batchnorm_forward(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            &rm,
            &rv,
            BnMode::Train
        )
        .is_err());
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (shape, mode) in [
            (vec![4, 3], BnMode::Train),
            (vec![3, 2, 2, 3], BnMode::Train),
            (vec![3, 2, 2, 2], BnMode::Eval),
        ] {
            let c = shape[1];
            let x = Tensor::<f64>::from_fn(&shape, |_| rng.random_range(-2.0..2.0));
            let gamma = Tensor::<f64>::from_fn(&[c], |_| rng.random_range(0.5..1.5));
            let beta = Tensor::<f64>::from_fn(&[c], |_| rng.random_range(-0.5..0.5));
            let rm = Tensor::<f64>::from_fn(&[c], |_| rng.random_range(-0.5..0.5));
            let rv = Tensor::<f64>::from_fn(&[c], |_| rng.random_range(0.5..1.5));
            let probe = Tensor::<f64>::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
            let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
                batchnorm_forward(x, g, b, &rm, &rv, mode).unwrap().0.dot(&probe)
            };
            let (_, cache) = batchnorm_forward(&x, &gamma, &beta, &rm, &rv, mode).unwrap();
            let (dx, dg, db) = batchnorm_backward(&cache, &gamma, &probe).unwrap();
            let fd_x = finite_difference_gradient(
                |p| loss(&Tensor::new(shape.clone(), p.to_vec()).unwrap(), &gamma, &beta),
                x.data(),
                1e-5,
            )
            .unwrap();
            let fd_g = finite_difference_gradient(
                |p| loss(&x, &Tensor::new(vec![c], p.to_vec()).unwrap(), &beta),
                gamma.data(),
                1e-5,
            )
            .unwrap();
            let fd_b = finite_difference_gradient(
                |p| loss(&x, &gamma, &Tensor::new(vec![c], p.to_vec()).unwrap()),
                beta.data(),
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(dx.data(), &fd_x) < 1e-4);
            assert!(max_relative_error(dg.data(), &fd_g) < 1e-4);
            assert!(max_relative_error(db.data(), &fd_b) < 1e-4);
        }
    }
}
