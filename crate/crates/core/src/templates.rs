//! Template banks and template-mixed weight generation.
//!
//! A layer's weights are never stored directly. Each layer (or each tile of a
//! grown layer) owns a short coefficient vector `alpha` and reads a bank of
//! `t` templates shaped like the small layer's weights:
//!
//! ```text
//! W = sum_k alpha[k] * T[k]
//! ```
//!
//! Up to two consecutive layers with identical weight shapes read the same
//! bank. Gradients flow to both factors: `dL/dalpha[k] = <dW, T[k]>` and
//! `dL/dT[k] += alpha[k] * dW` summed over every tile that used the bank.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::numerics::{Scalar, Tensor};

/// Templates per bank unless configured otherwise.
pub const DEFAULT_TEMPLATES: usize = 2;

/// The `t` shared templates behind one sharing group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank<T = f32> {
    pub id: usize,
    pub template_shape: Vec<usize>,
    pub templates: Vec<Tensor<T>>,
    /// Layers of the originating small network that read this bank.
    pub members: Vec<usize>,
}

impl<T: Scalar> TemplateBank<T> {
    pub fn new(
        id: usize,
        template_shape: Vec<usize>,
        templates: Vec<Tensor<T>>,
        members: Vec<usize>,
    ) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("a template bank needs t >= 1".into()));
        }
        if members.is_empty() || members.len() > 2 {
            return Err(Error::Config(format!(
                "a template bank serves 1 or 2 layers, got {}",
                members.len()
            )));
        }
        if let Some(bad) = templates.iter().find(|t| t.shape() != template_shape.as_slice()) {
            return Err(Error::dim(format!(
                "template shape {:?} differs from bank shape {template_shape:?}",
                bad.shape()
            )));
        }
        Ok(Self {
            id,
            template_shape,
            templates,
            members,
        })
    }

    /// Draws `t` templates from the fan-in scaled uniform initializer a plain
    /// layer of this shape would use.
    pub fn init<R: Rng + ?Sized>(
        id: usize,
        template_shape: Vec<usize>,
        t: usize,
        members: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let templates = (0..t).map(|_| he_uniform(&template_shape, rng)).collect();
        Self::new(id, template_shape, templates, members)
    }

    #[inline]
    pub fn t(&self) -> usize {
        self.templates.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.templates.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.templates.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }
}

/// He-uniform draw: `U(-b, b)` with `b = sqrt(6 / fan_in)`, where fan-in is
/// the product of every weight dimension after the output dimension.
pub fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// Identifies which tile of which layer a coefficient vector mixes for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoefficientOwner {
    pub layer: usize,
    /// Row-major index into the layer's tile grid.
    pub tile: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector<T = f32> {
    pub owner: CoefficientOwner,
    pub alpha: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> CoefficientVector<T> {
    pub fn new(layer: usize, tile: usize, alpha: Vec<T>, trainable: bool) -> Self {
        Self {
            owner: CoefficientOwner { layer, tile },
            alpha,
            trainable,
        }
    }

    /// `(0, .., 1, .., 0)` with the one at `index`.
    pub fn selector(layer: usize, tile: usize, t: usize, index: usize, trainable: bool) -> Self {
        let alpha = (0..t)
            .map(|k| if k == index { T::one() } else { T::zero() })
            .collect();
        Self::new(layer, tile, alpha, trainable)
    }
}

/// Partition of the templated layers into bank-backed groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub groups: Vec<Vec<usize>>,
}

impl SharingPlan {
    pub fn group_of(&self, layer: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&layer))
    }
}

/// Greedy left-to-right pairing of consecutive layers with identical weight
/// shapes. The first and last layers always stand alone.
pub fn build_sharing_plan(spec: &NetworkSpec) -> SharingPlan {
    let shapes: Vec<Vec<usize>> = (0..spec.layers.len())
        .map(|i| spec.weight_shape(i))
        .collect();
    pair_consecutive(&shapes)
}

pub(crate) fn pair_consecutive(shapes: &[Vec<usize>]) -> SharingPlan {
    let n = shapes.len();
    let mut groups = Vec::new();
    let mut i = 0;
    while i < n {
        let interior = |j: usize| j != 0 && j + 1 != n;
        if interior(i) && i + 1 < n && interior(i + 1) && shapes[i] == shapes[i + 1] {
            groups.push(vec![i, i + 1]);
            i += 2;
        } else {
            groups.push(vec![i]);
            i += 1;
        }
    }
    SharingPlan { groups }
}

/// `W = sum_k alpha[k] * T[k]`.
pub fn generate_weights<T: Scalar>(
    bank: &TemplateBank<T>,
    coeff: &CoefficientVector<T>,
) -> Result<Tensor<T>> {
    if coeff.alpha.len() != bank.t() {
        return Err(Error::dim(format!(
            "{} coefficients for a bank of {} templates",
            coeff.alpha.len(),
            bank.t()
        )));
    }
    let mut w = Tensor::zeros(&bank.template_shape);
    for (&a, template) in coeff.alpha.iter().zip(&bank.templates) {
        if a != T::zero() {
            w.add_scaled(template, a);
        }
    }
    Ok(w)
}

/// `dL/dalpha[k] = <dW, T[k]>`.
pub fn coefficient_grads<T: Scalar>(d_w: &Tensor<T>, bank: &TemplateBank<T>) -> Result<Vec<T>> {
    if d_w.shape() != bank.template_shape.as_slice() {
        return Err(Error::dim(format!(
            "weight grad {:?} vs template shape {:?}",
            d_w.shape(),
            bank.template_shape
        )));
    }
    Ok(bank.templates.iter().map(|t| d_w.dot(t)).collect())
}

/// `grad_bank[k] += alpha[k] * dW`.
pub fn accumulate_template_grads<T: Scalar>(
    d_w: &Tensor<T>,
    coeff: &CoefficientVector<T>,
    grad_bank: &mut [Tensor<T>],
) -> Result<()> {
    if coeff.alpha.len() != grad_bank.len() {
        return Err(Error::dim(format!(
            "{} coefficients for {} template grads",
            coeff.alpha.len(),
            grad_bank.len()
        )));
    }
    for (&a, g) in coeff.alpha.iter().zip(grad_bank.iter_mut()) {
        if g.shape() != d_w.shape() {
            return Err(Error::dim(format!(
                "weight grad {:?} vs template grad {:?}",
                d_w.shape(),
                g.shape()
            )));
        }
        if a != T::zero() {
            g.add_scaled(d_w, a);
        }
    }
    Ok(())
}
