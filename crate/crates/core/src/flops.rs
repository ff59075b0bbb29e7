//! Multiply-accumulate accounting. One MAC counts as one FLOP.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerSpec, Model, NetworkSpec};
use crate::numerics::{conv_output_size, Scalar};

/// Backward pass cost relative to forward.
pub const BACKWARD_FACTOR: u64 = 2;

/// MACs of one example through `layer`, whose widths are taken as given.
/// `input` is `(C, H, W)`; dense layers expect `H = W = 1`.
pub fn layer_macs(layer: &LayerSpec, input: [usize; 3]) -> Result<u64> {
    let [c, h, w] = input;
    if c != layer.in_width {
        return Err(Error::dim(format!(
            "{} layer expects {} input channels, got {c}",
            layer.kind.name(),
            layer.in_width
        )));
    }
    match layer.kind {
        LayerKind::Dense => {
            if h * w != 1 {
                return Err(Error::dim("dense layer on a spatial input"));
            }
            Ok(macs(layer.kind, layer.in_width, layer.out_width, (1, 1)))
        }
        k => {
            let oh = conv_output_size(h, k.kernel(), layer.stride, k.padding())?;
            let ow = conv_output_size(w, k.kernel(), layer.stride, k.padding())?;
            Ok(macs(k, layer.in_width, layer.out_width, (oh, ow)))
        }
    }
}

fn macs(kind: LayerKind, cin: usize, cout: usize, (oh, ow): (usize, usize)) -> u64 {
    let k = kind.kernel() as u64;
    cout as u64 * cin as u64 * k * k * oh as u64 * ow as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: LayerKind,
    pub macs: u64,
    /// Weight plus bias scalars of the materialized layer.
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub forward_macs_per_example: u64,
    pub train_macs_per_example: u64,
}

impl FlopsReport {
    /// CSV with columns `layer_id,kind,macs,params`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,kind,macs,params\n");
        for l in &self.per_layer {
            let _ = writeln!(out, "{},{},{},{}", l.layer, l.kind.name(), l.macs, l.params);
        }
        out
    }
}

pub fn model_forward_macs(spec: &NetworkSpec) -> Result<FlopsReport> {
    let spatial = spec.layer_output_spatial()?;
    let per_layer: Vec<LayerFlops> = (0..spec.layers.len())
        .map(|i| {
            let l = &spec.layers[i];
            let (cin, cout) = (spec.in_width(i), spec.out_width(i));
            LayerFlops {
                layer: i,
                kind: l.kind,
                macs: macs(l.kind, cin, cout, spatial[i]),
                params: (spec.weight_count(i) + if l.bias { cout } else { 0 }) as u64,
            }
        })
        .collect();
    let forward: u64 = per_layer.iter().map(|l| l.macs).sum();
    Ok(FlopsReport {
        per_layer,
        forward_macs_per_example: forward,
        train_macs_per_example: forward * (1 + BACKWARD_FACTOR),
    })
}

/// `epochs * examples * 3 * forward`.
pub fn training_macs(spec: &NetworkSpec, examples_per_epoch: u64, epochs: u64) -> Result<u64> {
    Ok(model_forward_macs(spec)?.train_macs_per_example * examples_per_epoch * epochs)
}

/// MACs spent regenerating every layer's weights from templates once, which
/// happens once per forward pass regardless of batch size. Not part of
/// [`FlopsReport`].
pub fn template_mixing_macs<T: Scalar>(model: &Model<T>) -> u64 {
    model
        .tilings
        .iter()
        .flat_map(|g| &g.tiles)
        .map(|tile| {
            let bank = &model.banks[tile.bank];
            (bank.t() * bank.template_shape.iter().product::<usize>()) as u64
        })
        .sum()
}

/// Compute accounting for one run, normalized by the cost of training the
/// target network for its full schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub target_full_schedule_macs: u64,
    pub consumed_macs: u64,
    /// Training stops once `consumed_macs` reaches this.
    pub allowance_macs: u64,
    /// Cost of the pretrained small net, counted only when `count_pretrained`.
    pub pretrained_macs: u64,
    pub count_pretrained: bool,
}

impl Budget {
    pub fn new(target_full_schedule_macs: u64, allowance_macs: u64) -> Result<Self> {
        if target_full_schedule_macs == 0 {
            return Err(Error::Config("budget target must be positive".into()));
        }
        Ok(Self {
            target_full_schedule_macs,
            consumed_macs: 0,
            allowance_macs,
            pretrained_macs: 0,
            count_pretrained: false,
        })
    }

    /// Allowance expressed as a fraction of the target.
    pub fn with_norm(target_full_schedule_macs: u64, norm: f64) -> Result<Self> {
        if !(norm >= 0.0) {
            return Err(Error::Config(format!("FLOPs norm must be >= 0, got {norm}")));
        }
        Self::new(
            target_full_schedule_macs,
            (target_full_schedule_macs as f64 * norm).round() as u64,
        )
    }

    pub fn charge(&mut self, macs: u64) {
        self.consumed_macs = self.consumed_macs.saturating_add(macs);
    }

    pub fn remaining(&self) -> u64 {
        self.allowance_macs.saturating_sub(self.consumed_macs)
    }

    pub fn exhausted(&self) -> bool {
        self.consumed_macs >= self.allowance_macs
    }

    /// MACs that count toward the FLOPs norm.
    pub fn counted_macs(&self) -> u64 {
        self.consumed_macs + if self.count_pretrained { self.pretrained_macs } else { 0 }
    }
}

pub fn flops_norm(budget: &Budget) -> Result<f64> {
    if budget.target_full_schedule_macs == 0 {
        return Err(Error::Config("budget target must be positive".into()));
    }
    Ok(budget.counted_macs() as f64 / budget.target_full_schedule_macs as f64)
}
