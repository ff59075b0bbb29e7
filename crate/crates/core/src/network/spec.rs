use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::conv_output_size;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv3x3,
    Conv1x1,
}

impl LayerKind {
    pub fn kernel(self) -> usize {
        match self {
            LayerKind::Dense | LayerKind::Conv1x1 => 1,
            LayerKind::Conv3x3 => 3,
        }
    }

    pub fn padding(self) -> usize {
        match self {
            LayerKind::Conv3x3 => 1,
            _ => 0,
        }
    }

    pub fn is_conv(self) -> bool {
        !matches!(self, LayerKind::Dense)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
        }
    }
}

/// One weighted layer, widths given at `width_multiplier == 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_width: usize,
    pub out_width: usize,
    pub stride: usize,
    pub bias: bool,
}

impl LayerSpec {
    pub fn dense(in_width: usize, out_width: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_width,
            out_width,
            stride: 1,
            bias: true,
        }
    }

    pub fn conv3x3(in_width: usize, out_width: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Conv3x3,
            in_width,
            out_width,
            stride,
            bias: true,
        }
    }

    pub fn conv1x1(in_width: usize, out_width: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Conv1x1,
            in_width,
            out_width,
            stride,
            bias: false,
        }
    }
}

/// Forward-graph element. Layers are referenced by index into
/// [`NetworkSpec::layers`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// `[B, C, H, W] -> [B, C*H*W]`, channel-major.
    Flatten,
    /// `x -> [bn] -> layer -> [relu]`.
    Layer { layer: usize, bn: bool, relu: bool },
    /// Pre-activation residual block:
    /// `h = relu(bn(x))`, `out = second(relu(first(h))) + (shortcut(h) | x)`.
    Residual {
        bn: bool,
        first: usize,
        second: usize,
        shortcut: Option<usize>,
    },
    Relu,
    /// `[B, C, H, W] -> [B, C]`.
    GlobalAvgPool,
}

/// Architecture description. Interior widths scale with `width_multiplier`;
/// the input width of the first layer and the output width of the last do not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// `(C, H, W)` of one example.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub stages: Vec<Stage>,
    pub class_count: usize,
    pub width_multiplier: usize,
}

/// Activation shape of one example while walking the stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Map(usize, usize, usize),
    Flat(usize),
}

pub const PRESETS: [&str; 3] = ["mlp-blobs", "cnn-mnist", "wrn-mini-cifar"];

impl NetworkSpec {
    /// Builds a named preset at its small (half) width.
    pub fn preset(name: &str, input: [usize; 3], class_count: usize) -> Result<Self> {
        let spec = match name {
            "mlp-blobs" => {
                let d = input.iter().product();
                Self {
                    name: name.into(),
                    input,
                    layers: vec![
                        LayerSpec::dense(d, 16),
                        LayerSpec::dense(16, 16),
                        LayerSpec::dense(16, 16),
                        LayerSpec::dense(16, class_count),
                    ],
                    stages: vec![
                        Stage::Flatten,
                        Stage::Layer { layer: 0, bn: false, relu: true },
                        Stage::Layer { layer: 1, bn: false, relu: true },
                        Stage::Layer { layer: 2, bn: false, relu: true },
                        Stage::Layer { layer: 3, bn: false, relu: false },
                    ],
                    class_count,
                    width_multiplier: 1,
                }
            }
            "cnn-mnist" => Self {
                name: name.into(),
                input,
                layers: vec![
                    LayerSpec::conv3x3(input[0], 8, 1),
                    LayerSpec::conv3x3(8, 8, 2),
                    LayerSpec::conv3x3(8, 16, 2),
                    LayerSpec::conv3x3(16, 16, 1),
                    LayerSpec::dense(16, class_count),
                ],
                stages: vec![
                    Stage::Layer { layer: 0, bn: false, relu: true },
                    Stage::Layer { layer: 1, bn: true, relu: true },
                    Stage::Layer { layer: 2, bn: true, relu: true },
                    Stage::Layer { layer: 3, bn: true, relu: true },
                    Stage::GlobalAvgPool,
                    Stage::Layer { layer: 4, bn: false, relu: false },
                ],
                class_count,
                width_multiplier: 1,
            },
            // WRN-10 layout (one block per group) at half of widening factor 1.
            "wrn-mini-cifar" => {
                let mut c1 = LayerSpec::conv3x3(8, 8, 1);
                let mut c2 = LayerSpec::conv3x3(8, 8, 1);
                let mut c3 = LayerSpec::conv3x3(8, 16, 2);
                let mut c4 = LayerSpec::conv3x3(16, 16, 1);
                let mut c6 = LayerSpec::conv3x3(16, 32, 2);
                let mut c7 = LayerSpec::conv3x3(32, 32, 1);
                for l in [&mut c1, &mut c2, &mut c3, &mut c4, &mut c6, &mut c7] {
                    l.bias = false;
                }
                let mut stem = LayerSpec::conv3x3(input[0], 8, 1);
                stem.bias = false;
                Self {
                    name: name.into(),
                    input,
                    layers: vec![
                        stem,
                        c1,
                        c2,
                        c3,
                        c4,
                        LayerSpec::conv1x1(8, 16, 2),
                        c6,
                        c7,
                        LayerSpec::conv1x1(16, 32, 2),
                        LayerSpec::dense(32, class_count),
                    ],
                    stages: vec![
                        Stage::Layer { layer: 0, bn: false, relu: false },
                        Stage::Residual { bn: true, first: 1, second: 2, shortcut: None },
                        Stage::Residual { bn: true, first: 3, second: 4, shortcut: Some(5) },
                        Stage::Residual { bn: true, first: 6, second: 7, shortcut: Some(8) },
                        Stage::Relu,
                        Stage::GlobalAvgPool,
                        Stage::Layer { layer: 9, bn: false, relu: false },
                    ],
                    class_count,
                    width_multiplier: 1,
                }
            }
            other => {
                return Err(Error::InvalidSpec(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same topology with every interior width multiplied by `factor`.
    pub fn widened(&self, factor: usize) -> Self {
        let mut s = self.clone();
        s.width_multiplier *= factor;
        s
    }

    #[inline]
    pub fn last_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn is_edge_layer(&self, layer: usize) -> bool {
        layer == 0 || layer == self.last_layer()
    }

    pub fn in_width(&self, layer: usize) -> usize {
        let base = self.layers[layer].in_width;
        if layer == 0 {
            base
        } else {
            base * self.width_multiplier
        }
    }

    pub fn out_width(&self, layer: usize) -> usize {
        let base = self.layers[layer].out_width;
        if layer == self.last_layer() {
            base
        } else {
            base * self.width_multiplier
        }
    }

    pub fn weight_shape(&self, layer: usize) -> Vec<usize> {
        let l = &self.layers[layer];
        let (o, i) = (self.out_width(layer), self.in_width(layer));
        match l.kind {
            LayerKind::Dense => vec![o, i],
            k => vec![o, i, k.kernel(), k.kernel()],
        }
    }

    pub fn weight_count(&self, layer: usize) -> usize {
        self.weight_shape(layer).iter().product()
    }

    /// Channels entering each stage; `Some` only for stages that carry BN.
    pub fn bn_channels(&self) -> Vec<Option<usize>> {
        self.walk()
            .expect("spec validated at construction")
            .into_iter()
            .zip(&self.stages)
            .map(|(act, stage)| match stage {
                Stage::Layer { bn: true, .. } | Stage::Residual { bn: true, .. } => {
                    Some(match act.input {
                        Act::Map(c, _, _) => c,
                        Act::Flat(d) => d,
                    })
                }
                _ => None,
            })
            .collect()
    }

    /// Spatial output size `(H', W')` of each layer (1x1 for dense).
    pub fn layer_output_spatial(&self) -> Result<Vec<(usize, usize)>> {
        let mut out = vec![(1, 1); self.layers.len()];
        for step in self.walk()? {
            for (layer, spatial) in step.layer_outputs {
                out[layer] = spatial;
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidSpec("need at least an input and a classifier layer".into()));
        }
        if self.width_multiplier == 0 || self.class_count < 2 {
            return Err(Error::InvalidSpec(
                "width multiplier must be >= 1 and class count >= 2".into(),
            ));
        }
        if self.input.contains(&0) {
            return Err(Error::InvalidSpec(format!("bad input shape {:?}", self.input)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_width == 0 || l.out_width == 0 || l.stride == 0 {
                return Err(Error::InvalidSpec(format!("layer {i} has a zero width or stride")));
            }
        }
        let last = self.last_layer();
        if self.layers[last].kind != LayerKind::Dense || self.layers[last].out_width != self.class_count {
            return Err(Error::InvalidSpec(
                "last layer must be a dense classifier with class_count outputs".into(),
            ));
        }
        let walk = self.walk()?;
        let mut seen = vec![0usize; self.layers.len()];
        let mut order = Vec::new();
        for step in &walk {
            for &(layer, _) in &step.layer_outputs {
                seen[layer] += 1;
                order.push(layer);
            }
        }
        if let Some(i) = seen.iter().position(|&n| n != 1) {
            return Err(Error::InvalidSpec(format!(
                "layer {i} is used {} times; every layer must be used exactly once",
                seen[i]
            )));
        }
        if order.first() != Some(&0) || order.last() != Some(&last) {
            return Err(Error::InvalidSpec(
                "layer 0 must consume the input and the last layer must produce the logits".into(),
            ));
        }
        match walk.last().map(|s| s.output) {
            Some(Act::Flat(k)) if k == self.class_count => Ok(()),
            other => Err(Error::InvalidSpec(format!(
                "network ends with {other:?}, expected {} logits",
                self.class_count
            ))),
        }
    }

    fn walk(&self) -> Result<Vec<StageShapes>> {
        let [c, h, w] = self.input;
        let mut act = Act::Map(c, h, w);
        let mut steps = Vec::with_capacity(self.stages.len());
        for (si, stage) in self.stages.iter().enumerate() {
            let input = act;
            let mut layer_outputs = Vec::new();
            let err = |msg: String| Error::InvalidSpec(format!("stage {si}: {msg}"));
            act = match stage {
                Stage::Flatten => match act {
                    Act::Map(c, h, w) => Act::Flat(c * h * w),
                    Act::Flat(d) => Act::Flat(d),
                },
                Stage::Relu => act,
                Stage::GlobalAvgPool => match act {
                    Act::Map(c, _, _) => Act::Flat(c),
                    Act::Flat(_) => return Err(err("pooling a flat activation".into())),
                },
                Stage::Layer { layer, .. } => {
                    let (out, spatial) = self.apply_shape(*layer, act).map_err(err)?;
                    layer_outputs.push((*layer, spatial));
                    out
                }
                Stage::Residual {
                    first,
                    second,
                    shortcut,
                    ..
                } => {
                    for &l in [first, second].into_iter().chain(shortcut.iter()) {
                        if !self.layers.get(l).is_some_and(|s| s.kind.is_conv()) {
                            return Err(err(format!("residual layer {l} must be a convolution")));
                        }
                    }
                    let (mid, s1) = self.apply_shape(*first, act).map_err(err)?;
                    let (out, s2) = self.apply_shape(*second, mid).map_err(err)?;
                    layer_outputs.push((*first, s1));
                    layer_outputs.push((*second, s2));
                    match shortcut {
                        Some(p) => {
                            let (skip, s3) = self.apply_shape(*p, act).map_err(err)?;
                            if skip != out {
                                return Err(err(format!("shortcut gives {skip:?}, branch {out:?}")));
                            }
                            layer_outputs.push((*p, s3));
                        }
                        None if act != out => {
                            return Err(err(format!(
                                "identity shortcut needs matching shapes, {act:?} vs {out:?}"
                            )))
                        }
                        None => {}
                    }
                    out
                }
            };
            steps.push(StageShapes {
                input,
                output: act,
                layer_outputs,
            });
        }
        Ok(steps)
    }

    fn apply_shape(&self, layer: usize, act: Act) -> std::result::Result<(Act, (usize, usize)), String> {
        let spec = self
            .layers
            .get(layer)
            .ok_or_else(|| format!("layer {layer} does not exist"))?;
        let (iw, ow) = (self.in_width(layer), self.out_width(layer));
        match (spec.kind, act) {
            (LayerKind::Dense, Act::Flat(d)) if d == iw => Ok((Act::Flat(ow), (1, 1))),
            (LayerKind::Dense, a) => Err(format!("dense layer {layer} expects [{iw}], got {a:?}")),
            (k, Act::Map(c, h, w)) if c == iw => {
                let oh = conv_output_size(h, k.kernel(), spec.stride, k.padding())
                    .map_err(|e| e.to_string())?;
                let owd = conv_output_size(w, k.kernel(), spec.stride, k.padding())
                    .map_err(|e| e.to_string())?;
                Ok((Act::Map(ow, oh, owd), (oh, owd)))
            }
            (_, a) => Err(format!("conv layer {layer} expects {iw} channels, got {a:?}")),
        }
    }

    /// True when the two specs differ at most in width multiplier.
    pub fn same_topology(&self, other: &NetworkSpec) -> bool {
        self.input == other.input
            && self.layers == other.layers
            && self.stages == other.stages
            && self.class_count == other.class_count
    }
}

struct StageShapes {
    input: Act,
    output: Act,
    layer_outputs: Vec<(usize, (usize, usize))>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_at_both_widths() {
        for (name, input) in [
            ("mlp-blobs", [2, 1, 1]),
            ("cnn-mnist", [1, 28, 28]),
            ("cnn-mnist", [1, 8, 8]),
            ("wrn-mini-cifar", [3, 32, 32]),
        ] {
            let s = NetworkSpec::preset(name, input, 10).unwrap();
            s.validate().unwrap();
            s.widened(2).validate().unwrap();
        }
        assert!(NetworkSpec::preset("resnet-50", [3, 32, 32], 10).is_err());
    }

    #[test]
    fn multiplier_doubles_interior_weights_in_both_dims() {
        let small = NetworkSpec::preset("mlp-blobs", [2, 1, 1], 5).unwrap();
        let large = small.widened(2);
        assert_eq!(small.weight_shape(0), vec![16, 2]);
        assert_eq!(large.weight_shape(0), vec![32, 2]);
        assert_eq!(small.weight_shape(1), vec![16, 16]);
        assert_eq!(large.weight_shape(1), vec![32, 32]);
        assert_eq!(large.weight_shape(3), vec![5, 32]);
    }

    #[test]
    fn rejects_broken_specs() {
        let mut s = NetworkSpec::preset("mlp-blobs", [2, 1, 1], 3).unwrap();
        s.layers[2].in_width = 7;
        assert!(s.validate().is_err());

        let mut s = NetworkSpec::preset("mlp-blobs", [2, 1, 1], 3).unwrap();
        s.stages.remove(2);
        assert!(s.validate().is_err());

        let mut s = NetworkSpec::preset("wrn-mini-cifar", [3, 32, 32], 10).unwrap();
        s.stages[2] = Stage::Residual { bn: true, first: 3, second: 4, shortcut: None };
        assert!(s.validate().is_err());
    }

    #[test]
    fn wrn_bn_channels_sit_before_blocks() {
        let s = NetworkSpec::preset("wrn-mini-cifar", [3, 32, 32], 10).unwrap().widened(2);
        let bn = s.bn_channels();
        assert_eq!(bn, vec![None, Some(16), Some(16), Some(32), None, None, None]);
    }

    #[test]
    fn output_spatial_sizes() {
        let s = NetworkSpec::preset("wrn-mini-cifar", [3, 32, 32], 10).unwrap();
        let sp = s.layer_output_spatial().unwrap();
        assert_eq!(sp[0], (32, 32));
        assert_eq!(sp[3], (16, 16));
        assert_eq!(sp[8], (8, 8));
        assert_eq!(sp[9], (1, 1));
    }
}
