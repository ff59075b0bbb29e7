use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NetworkSpec;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::templates::{
    build_sharing_plan, generate_weights, CoefficientVector, SharingPlan, TemplateBank,
    DEFAULT_TEMPLATES,
};

/// One block of a layer's weight grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub bank: usize,
    pub coefficient: usize,
}

/// Row-major `rows x cols` grid of tiles: rows split the output dimension,
/// columns split the input dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub tiles: Vec<Tile>,
}

impl TileGrid {
    pub fn single(bank: usize, coefficient: usize) -> Self {
        Self {
            rows: 1,
            cols: 1,
            tiles: vec![Tile { bank, coefficient }],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Tile {
        self.tiles[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    /// `gamma = 1`, `beta = 0`, running statistics `(0, 1)`.
    pub fn fresh(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let cat = |f: fn(&Self) -> &Tensor<T>| {
            Tensor::concat_rows(&parts.iter().map(|p| f(p)).collect::<Vec<_>>())
        };
        Ok(Self {
            gamma: cat(|p| &p.gamma)?,
            beta: cat(|p| &p.beta)?,
            running_mean: cat(|p| &p.running_mean)?,
            running_var: cat(|p| &p.running_var)?,
        })
    }

    fn cast<U: Scalar>(&self) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOptions {
    pub templates: usize,
    /// Whether the first and last layers' coefficients are trained.
    pub train_edge_coefficients: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            templates: DEFAULT_TEMPLATES,
            train_edge_coefficients: false,
        }
    }
}

/// Trainable state of a template-mixing network. Layer weights are
/// regenerated from banks and coefficients on every forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model<T = f32> {
    pub spec: NetworkSpec,
    pub sharing: SharingPlan,
    pub banks: Vec<TemplateBank<T>>,
    pub coefficients: Vec<CoefficientVector<T>>,
    /// One grid per layer.
    pub tilings: Vec<TileGrid>,
    /// One entry per layer; `None` for bias-free layers.
    pub biases: Vec<Option<Tensor<T>>>,
    /// One entry per stage; `Some` where the stage normalizes its input.
    pub norms: Vec<Option<BatchNormParams<T>>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParameterCount {
    pub template_scalars: usize,
    pub coefficient_scalars: usize,
    pub other_scalars: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.template_scalars + self.coefficient_scalars + self.other_scalars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Template,
    Coefficient { trainable: bool },
    Bias,
    BnScale,
    BnShift,
}

pub struct ParamSlot<'a, T> {
    pub kind: ParamKind,
    pub values: &'a mut [T],
}

/// Builds a template-mixing model with default options.
pub fn build_model<T: Scalar>(spec: &NetworkSpec, t: usize, seed: u64) -> Result<Model<T>> {
    Model::build(
        spec,
        ModelOptions {
            templates: t,
            ..ModelOptions::default()
        },
        seed,
    )
}

impl<T: Scalar> Model<T> {
    /// One bank per sharing group; member `j` of a group starts from the
    /// selector coefficient `e_j`, so every layer's initial weights are one
    /// plain fan-in scaled draw.
    pub fn build(spec: &NetworkSpec, options: ModelOptions, seed: u64) -> Result<Self> {
        spec.validate()?;
        if options.templates == 0 {
            return Err(Error::Config("need at least one template per bank".into()));
        }
        let t = options.templates;
        let sharing = build_sharing_plan(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut banks = Vec::with_capacity(sharing.groups.len());
        let mut tilings = vec![TileGrid::single(0, 0); spec.layers.len()];
        let mut coefficients = Vec::with_capacity(spec.layers.len());
        for (g, members) in sharing.groups.iter().enumerate() {
            let shape = spec.weight_shape(members[0]);
            banks.push(TemplateBank::init(g, shape, t, members.clone(), &mut rng)?);
            for (j, &layer) in members.iter().enumerate() {
                let trainable = options.train_edge_coefficients || !spec.is_edge_layer(layer);
                tilings[layer] = TileGrid::single(g, coefficients.len());
                coefficients.push(CoefficientVector::selector(layer, 0, t, j % t, trainable));
            }
        }
        let biases = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.bias.then(|| Tensor::zeros(&[spec.out_width(i)])))
            .collect();
        let norms = spec
            .bn_channels()
            .into_iter()
            .map(|c| c.map(BatchNormParams::fresh))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            sharing,
            banks,
            coefficients,
            tilings,
            biases,
            norms,
            seed,
        })
    }

    pub fn templates_per_bank(&self) -> usize {
        self.banks.first().map_or(0, TemplateBank::t)
    }

    /// Materializes layer `layer`'s weight tensor from its tile grid.
    pub fn layer_weight(&self, layer: usize) -> Result<Tensor<T>> {
        let grid = &self.tilings[layer];
        let shape = self.spec.weight_shape(layer);
        let mut full = Tensor::zeros(&shape);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let tile = grid.get(r, c);
                let bank = &self.banks[tile.bank];
                let block = generate_weights(bank, &self.coefficients[tile.coefficient])?;
                place_block(&mut full, &block, grid, r, c)?;
            }
        }
        Ok(full)
    }

    pub fn layer_weights(&self) -> Result<Vec<Tensor<T>>> {
        (0..self.spec.layers.len()).map(|i| self.layer_weight(i)).collect()
    }

    pub fn parameter_count(&self) -> ParameterCount {
        ParameterCount {
            template_scalars: self.banks.iter().map(TemplateBank::scalar_count).sum(),
            coefficient_scalars: self.coefficients.iter().map(|c| c.alpha.len()).sum(),
            other_scalars: self.biases.iter().flatten().map(Tensor::len).sum::<usize>()
                + self
                    .norms
                    .iter()
                    .flatten()
                    .map(|n| n.gamma.len() + n.beta.len())
                    .sum::<usize>(),
        }
    }

    /// Every parameter buffer in canonical order: templates (bank by bank),
    /// coefficients, biases, then BN scale and shift per stage.
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_, T>> {
        let mut slots = Vec::new();
        for bank in &mut self.banks {
            for t in &mut bank.templates {
                slots.push(ParamSlot {
                    kind: ParamKind::Template,
                    values: t.data_mut(),
                });
            }
        }
        for c in &mut self.coefficients {
            slots.push(ParamSlot {
                kind: ParamKind::Coefficient {
                    trainable: c.trainable,
                },
                values: &mut c.alpha,
            });
        }
        for b in self.biases.iter_mut().flatten() {
            slots.push(ParamSlot {
                kind: ParamKind::Bias,
                values: b.data_mut(),
            });
        }
        for n in self.norms.iter_mut().flatten() {
            slots.push(ParamSlot {
                kind: ParamKind::BnScale,
                values: n.gamma.data_mut(),
            });
            slots.push(ParamSlot {
                kind: ParamKind::BnShift,
                values: n.beta.data_mut(),
            });
        }
        slots
    }

    pub fn flat_params(&mut self) -> Vec<T> {
        self.param_slots()
            .into_iter()
            .flat_map(|s| s.values.to_vec())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let mut offset = 0;
        for slot in self.param_slots() {
            let n = slot.values.len();
            let src = flat
                .get(offset..offset + n)
                .ok_or_else(|| Error::dim("flat parameter vector too short"))?;
            slot.values.copy_from_slice(src);
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::dim("flat parameter vector too long"));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            sharing: self.sharing.clone(),
            banks: self
                .banks
                .iter()
                .map(|b| TemplateBank {
                    id: b.id,
                    template_shape: b.template_shape.clone(),
                    templates: b.templates.iter().map(Tensor::cast).collect(),
                    members: b.members.clone(),
                })
                .collect(),
            coefficients: self
                .coefficients
                .iter()
                .map(|c| CoefficientVector {
                    owner: c.owner,
                    alpha: c.alpha.iter().map(|&a| U::of(a.f64())).collect(),
                    trainable: c.trainable,
                })
                .collect(),
            tilings: self.tilings.clone(),
            biases: self.biases.iter().map(|b| b.as_ref().map(Tensor::cast)).collect(),
            norms: self.norms.iter().map(|n| n.as_ref().map(|n| n.cast())).collect(),
            seed: self.seed,
        }
    }

    /// Structural consistency: grids cover every layer's weight shape, every
    /// tile's bank and coefficient agree.
    pub fn check_consistency(&self) -> Result<()> {
        self.spec.validate()?;
        let n = self.spec.layers.len();
        if self.tilings.len() != n || self.biases.len() != n || self.norms.len() != self.spec.stages.len() {
            return Err(Error::InvalidSpec("model tables disagree with spec".into()));
        }
        for (layer, grid) in self.tilings.iter().enumerate() {
            if grid.tiles.len() != grid.rows * grid.cols || grid.tiles.is_empty() {
                return Err(Error::InvalidSpec(format!("layer {layer} has a malformed grid")));
            }
            let shape = self.spec.weight_shape(layer);
            for tile in &grid.tiles {
                let bank = self
                    .banks
                    .get(tile.bank)
                    .ok_or_else(|| Error::InvalidSpec(format!("layer {layer}: missing bank")))?;
                let coeff = self
                    .coefficients
                    .get(tile.coefficient)
                    .ok_or_else(|| Error::InvalidSpec(format!("layer {layer}: missing coefficient")))?;
                if coeff.alpha.len() != bank.t() {
                    return Err(Error::InvalidSpec(format!(
                        "layer {layer}: coefficient length {} vs {} templates",
                        coeff.alpha.len(),
                        bank.t()
                    )));
                }
                let ts = &bank.template_shape;
                if ts.len() != shape.len()
                    || ts[0] * grid.rows != shape[0]
                    || ts[1] * grid.cols != shape[1]
                    || ts[2..] != shape[2..]
                {
                    return Err(Error::InvalidSpec(format!(
                        "layer {layer}: {}x{} tiles of {ts:?} do not cover {shape:?}",
                        grid.rows, grid.cols
                    )));
                }
            }
            match (&self.biases[layer], self.spec.layers[layer].bias) {
                (Some(b), true) if b.len() == self.spec.out_width(layer) => {}
                (None, false) => {}
                _ => return Err(Error::InvalidSpec(format!("layer {layer}: bias mismatch"))),
            }
        }
        for (stage, (norm, channels)) in self.norms.iter().zip(self.spec.bn_channels()).enumerate() {
            match (norm, channels) {
                (Some(n), Some(c)) if n.gamma.len() == c && n.running_var.len() == c => {}
                (None, None) => {}
                _ => return Err(Error::InvalidSpec(format!("stage {stage}: batchnorm mismatch"))),
            }
        }
        Ok(())
    }
}

fn block_geometry(full: &[usize], grid: &TileGrid) -> (usize, usize, usize, usize) {
    let rows_per = full[0] / grid.rows;
    let cols_per = full[1] / grid.cols;
    let inner: usize = full[2..].iter().product();
    (rows_per, cols_per, inner, full[1] * inner)
}

/// Writes `block` into tile `(r, c)` of `full`.
pub fn place_block<T: Scalar>(
    full: &mut Tensor<T>,
    block: &Tensor<T>,
    grid: &TileGrid,
    r: usize,
    c: usize,
) -> Result<()> {
    let (rows_per, cols_per, inner, stride) = block_geometry(full.shape(), grid);
    if block.shape()[0] != rows_per || block.shape()[1] != cols_per {
        return Err(Error::dim(format!(
            "block {:?} does not fit a {}x{} grid over {:?}",
            block.shape(),
            grid.rows,
            grid.cols,
            full.shape()
        )));
    }
    let run = cols_per * inner;
    let dst = full.data_mut();
    for o in 0..rows_per {
        let start = (r * rows_per + o) * stride + c * run;
        dst[start..start + run].copy_from_slice(&block.data()[o * run..(o + 1) * run]);
    }
    Ok(())
}

/// Copies tile `(r, c)` out of `full`.
pub fn extract_block<T: Scalar>(full: &Tensor<T>, grid: &TileGrid, r: usize, c: usize) -> Tensor<T> {
    let (rows_per, cols_per, inner, stride) = block_geometry(full.shape(), grid);
    let run = cols_per * inner;
    let mut data = Vec::with_capacity(rows_per * run);
    for o in 0..rows_per {
        let start = (r * rows_per + o) * stride + c * run;
        data.extend_from_slice(&full.data()[start..start + run]);
    }
    let mut shape = full.shape().to_vec();
    shape[0] = rows_per;
    shape[1] = cols_per;
    Tensor::new(shape, data).expect("block shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, Stage};

    fn mlp(widths: &[usize]) -> NetworkSpec {
        let layers: Vec<LayerSpec> = widths.windows(2).map(|w| LayerSpec::dense(w[0], w[1])).collect();
        let n = layers.len();
        let mut stages = vec![Stage::Flatten];
        stages.extend((0..n).map(|i| Stage::Layer {
            layer: i,
            bn: false,
            relu: i + 1 < n,
        }));
        NetworkSpec {
            name: "mlp".into(),
            input: [widths[0], 1, 1],
            layers,
            stages,
            class_count: *widths.last().unwrap(),
            width_multiplier: 1,
        }
    }

    #[test]
    fn same_seed_same_model() {
        let spec = NetworkSpec::preset("cnn-mnist", [1, 8, 8], 4).unwrap();
        let a = build_model::<f32>(&spec, 2, 9).unwrap();
        let b = build_model::<f32>(&spec, 2, 9).unwrap();
        assert_eq!(a, b);
        let c = build_model::<f32>(&spec, 2, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_of_small_mlp() {
        // 8->16->16->4: three singleton banks of 2 templates each.
        let m = build_model::<f32>(&mlp(&[8, 16, 16, 4]), 2, 0).unwrap();
        let pc = m.parameter_count();
        assert_eq!(pc.template_scalars, 2 * (16 * 8 + 16 * 16 + 4 * 16));
        assert_eq!(pc.coefficient_scalars, 3 * 2);
        assert_eq!(pc.other_scalars, 16 + 16 + 4);

        // 8->16->16->16->4: the two 16x16 layers share one bank.
        let m = build_model::<f32>(&mlp(&[8, 16, 16, 16, 4]), 2, 0).unwrap();
        assert_eq!(m.sharing.groups, vec![vec![0], vec![1, 2], vec![3]]);
        let pc = m.parameter_count();
        assert_eq!(pc.template_scalars, 2 * (128 + 256 + 64));
        assert_eq!(pc.coefficient_scalars, 4 * 2);
        assert_eq!(pc.other_scalars, 16 * 3 + 4);
    }

    #[test]
    fn singleton_dense_layer_count() {
        let m = build_model::<f32>(&mlp(&[4, 4, 4]), 2, 0).unwrap();
        assert_eq!(m.banks[0].scalar_count(), 32);
        assert_eq!(m.coefficients[0].alpha.len(), 2);
    }

    #[test]
    fn initial_weights_are_one_template() {
        let m = build_model::<f64>(&mlp(&[8, 16, 16, 16, 4]), 2, 3).unwrap();
        assert_eq!(m.layer_weight(1).unwrap(), m.banks[1].templates[0]);
        assert_eq!(m.layer_weight(2).unwrap(), m.banks[1].templates[1]);
        assert!(!m.coefficients[0].trainable);
        assert!(m.coefficients[1].trainable);
        assert!(!m.coefficients[3].trainable);
        m.check_consistency().unwrap();
    }

    #[test]
    fn flat_params_roundtrip() {
        let spec = NetworkSpec::preset("wrn-mini-cifar", [3, 8, 8], 3).unwrap();
        let mut m = build_model::<f32>(&spec, 2, 1).unwrap();
        let mut flat = m.flat_params();
        assert_eq!(flat.len(), m.parameter_count().total());
        flat[0] = 42.0;
        m.set_flat_params(&flat).unwrap();
        assert_eq!(m.banks[0].templates[0].data()[0], 42.0);
        assert!(m.set_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn block_place_extract_roundtrip() {
        let grid = TileGrid {
            rows: 2,
            cols: 2,
            tiles: vec![Tile { bank: 0, coefficient: 0 }; 4],
        };
        let mut full = Tensor::<f64>::zeros(&[4, 6, 3, 3]);
        let block = Tensor::from_fn(&[2, 3, 3, 3], |i| i as f64);
        place_block(&mut full, &block, &grid, 1, 0).unwrap();
        assert_eq!(extract_block(&full, &grid, 1, 0), block);
        assert!(extract_block(&full, &grid, 0, 1).data().iter().all(|&v| v == 0.0));
    }
}
