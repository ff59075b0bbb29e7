//! Width growth: tiling one or two trained small models into a model `g`
//! times as wide.
//!
//! Every grown layer is a grid of small-layer-shaped tiles. Interior layers
//! get a `g x g` grid, the first layer a `g x 1` column (its input width is
//! fixed) and the last layer a `1 x g` row (its output width is fixed). Each
//! tile reads an existing bank and owns its own coefficient vector.
//!
//! With fusion the two small nets sit on the diagonal and only the
//! off-diagonal tiles get new coefficients. Without fusion the single small
//! net fills tile `(0, 0)` and its banks back every other tile.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BatchNormParams, Model, NetworkSpec, Tile, TileGrid};
use crate::numerics::{Scalar, Tensor};
use crate::templates::{he_uniform, CoefficientVector, TemplateBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// New coefficients drawn from `N(0, 1)`.
    Random,
    /// New coefficients duplicate the donor tile's coefficients.
    Copy,
    /// New coefficients are unit vectors orthogonal to the donor and to each other.
    Orthogonal,
    /// New tiles get freshly initialized weights in their own banks instead of
    /// reusing templates.
    BaselineRandomWeights,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Copy => "copy",
            Strategy::Orthogonal => "orthogonal",
            Strategy::BaselineRandomWeights => "baseline_random_weights",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Strategy::Random,
            Strategy::Copy,
            Strategy::Orthogonal,
            Strategy::BaselineRandomWeights,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

/// Which small net's bank feeds an off-diagonal tile under fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Orientation {
    /// Tiles in the same output row share that row's bank.
    #[default]
    Vertical,
    /// Tiles in the same input column share that column's bank.
    Horizontal,
}

impl Orientation {
    pub fn name(self) -> &'static str {
        match self {
            Orientation::Vertical => "vertical",
            Orientation::Horizontal => "horizontal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Orientation::Vertical, Orientation::Horizontal]
            .into_iter()
            .find(|o| o.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthPlan {
    pub g: usize,
    pub strategy: Strategy,
    pub fusion: bool,
    pub orientation: Orientation,
    /// Epochs the second small net trains before fusion.
    pub growth_epoch: usize,
    /// Scale the last layer's tiles (and bias) by `1 / g`.
    pub rescale_last: bool,
}

impl Default for GrowthPlan {
    fn default() -> Self {
        Self {
            g: 2,
            strategy: Strategy::Orthogonal,
            fusion: true,
            orientation: Orientation::Vertical,
            growth_epoch: 0,
            rescale_last: false,
        }
    }
}

impl GrowthPlan {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 {
            return Err(Error::Config("growth factor must be >= 1".into()));
        }
        if self.fusion && self.g != 2 {
            return Err(Error::Config(format!(
                "fusion places two nets on the diagonal and needs g = 2, got {}",
                self.g
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TileSource {
    /// Reuses the coefficient vector of small net `net`.
    Existing { net: usize },
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutTile {
    /// Small net whose bank backs this tile.
    pub bank_net: usize,
    pub source: TileSource,
    /// Grid position `(row, col)` of the tile that owns the bank's existing
    /// coefficients in this layer.
    pub donor: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTiling {
    pub rows: usize,
    pub cols: usize,
    pub tiles: Vec<LayoutTile>,
}

impl LayerTiling {
    pub fn get(&self, r: usize, c: usize) -> LayoutTile {
        self.tiles[r * self.cols + c]
    }

    pub fn new_tiles(&self) -> usize {
        self.tiles.iter().filter(|t| t.source == TileSource::New).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingLayout {
    pub g: usize,
    pub layers: Vec<LayerTiling>,
}

impl TilingLayout {
    pub fn new_coefficient_vectors(&self) -> usize {
        self.layers.iter().map(LayerTiling::new_tiles).sum()
    }
}

/// Assigns every tile of the grown network a bank and a coefficient source.
pub fn plan_tiling(spec: &NetworkSpec, plan: &GrowthPlan) -> Result<TilingLayout> {
    plan.validate()?;
    spec.validate()?;
    let g = plan.g;
    let large = spec.widened(g);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for i in 0..spec.layers.len() {
        let small = spec.weight_shape(i);
        let big = large.weight_shape(i);
        let rows = big[0] / small[0];
        let cols = big[1] / small[1];
        if rows * small[0] != big[0] || cols * small[1] != big[1] || ![1, g].contains(&rows) || ![1, g].contains(&cols) {
            return Err(Error::Growth(format!(
                "layer {i}: {big:?} is not a tiling of {small:?} at g = {g}"
            )));
        }
        let mut tiles = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                tiles.push(layout_tile(plan, rows, cols, r, c));
            }
        }
        layers.push(LayerTiling { rows, cols, tiles });
    }
    Ok(TilingLayout { g, layers })
}

fn layout_tile(plan: &GrowthPlan, rows: usize, cols: usize, r: usize, c: usize) -> LayoutTile {
    if !plan.fusion {
        let source = if (r, c) == (0, 0) {
            TileSource::Existing { net: 0 }
        } else {
            TileSource::New
        };
        return LayoutTile {
            bank_net: 0,
            source,
            donor: (0, 0),
        };
    }
    // Edge layers are a single row or column: each tile belongs to one net.
    let diagonal = |n: usize| (n.min(rows - 1), n.min(cols - 1));
    if rows == 1 || cols == 1 || r == c {
        let net = if rows == 1 { c } else { r };
        return LayoutTile {
            bank_net: net,
            source: TileSource::Existing { net },
            donor: diagonal(net),
        };
    }
    let net = match plan.orientation {
        Orientation::Vertical => r,
        Orientation::Horizontal => c,
    };
    LayoutTile {
        bank_net: net,
        source: TileSource::New,
        donor: diagonal(net),
    }
}

/// Draws `count` new coefficient vectors for tiles that read `bank`, given the
/// donor tile's coefficients.
pub fn init_new_coefficients<T: Scalar, R: Rng + ?Sized>(
    strategy: Strategy,
    bank: &TemplateBank<T>,
    donor: &[T],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    let t = bank.t();
    if donor.len() != t {
        return Err(Error::dim(format!(
            "donor has {} coefficients, bank has {t} templates",
            donor.len()
        )));
    }
    match strategy {
        Strategy::Random => Ok((0..count).map(|_| standard_normal(t, rng)).collect()),
        Strategy::Copy => Ok(vec![donor.to_vec(); count]),
        Strategy::Orthogonal => orthogonal_complement(donor, count, rng),
        Strategy::BaselineRandomWeights => Err(Error::Config(
            "the random-weight baseline creates new banks instead of coefficients".into(),
        )),
    }
}

fn standard_normal<T: Scalar, R: Rng + ?Sized>(t: usize, rng: &mut R) -> Vec<T> {
    (0..t).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Unit vectors orthogonal to `donor` and to each other, by Gram-Schmidt on
/// standard normal draws.
fn orthogonal_complement<T: Scalar, R: Rng + ?Sized>(
    donor: &[T],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    let t = donor.len();
    let donor: Vec<f64> = donor.iter().map(|v| v.f64()).collect();
    let norm = dot(&donor, &donor).sqrt();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    if norm > 1e-12 {
        basis.push(donor.iter().map(|v| v / norm).collect());
    }
    if basis.len() + count > t {
        return Err(Error::Config(format!(
            "orthogonal init needs {} mutually orthogonal vectors but t = {t}",
            basis.len() + count
        )));
    }
    let first_new = basis.len();
    while basis.len() < first_new + count {
        let mut v: Vec<f64> = standard_normal::<f64, R>(t, rng);
        // Two passes keep the result orthogonal to working precision.
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(basis[first_new..]
        .iter()
        .map(|v| v.iter().map(|&x| T::of(x)).collect())
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds the grown model. `small2` is required with fusion and ignored
/// otherwise; `seed` drives every random draw of the growth step.
pub fn grow<T: Scalar>(
    small1: &Model<T>,
    small2: Option<&Model<T>>,
    plan: &GrowthPlan,
    seed: u64,
) -> Result<Model<T>> {
    plan.validate()?;
    let nets: Vec<&Model<T>> = match (plan.fusion, small2) {
        (true, Some(s2)) => vec![small1, s2],
        (true, None) => return Err(Error::Growth("fusion needs two small models".into())),
        (false, _) => vec![small1],
    };
    for net in &nets {
        net.check_consistency()?;
        if net.tilings.iter().any(|g| g.rows * g.cols != 1) {
            return Err(Error::Growth("only ungrown models can be grown".into()));
        }
    }
    if let Some(other) = nets.get(1) {
        if !small1.spec.same_topology(&other.spec) || small1.spec.width_multiplier != other.spec.width_multiplier {
            return Err(Error::Growth(format!(
                "cannot fuse {:?} with {:?}: architectures differ",
                small1.spec.name, other.spec.name
            )));
        }
        if small1.templates_per_bank() != other.templates_per_bank() || small1.sharing != other.sharing {
            return Err(Error::Growth("fused models differ in template banks".into()));
        }
    }
    if plan.g == 1 && !plan.fusion {
        return Ok(small1.clone());
    }
    let layout = plan_tiling(&small1.spec, plan)?;
    let spec = small1.spec.widened(plan.g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Banks of net n occupy a contiguous block starting at n * per_net.
    let per_net = small1.banks.len();
    let mut banks: Vec<TemplateBank<T>> = Vec::with_capacity(per_net * nets.len());
    for net in &nets {
        for bank in &net.banks {
            let mut b = bank.clone();
            b.id = banks.len();
            banks.push(b);
        }
    }

    let mut coefficients: Vec<CoefficientVector<T>> = Vec::new();
    let mut tilings = Vec::with_capacity(spec.layers.len());
    for (layer, lt) in layout.layers.iter().enumerate() {
        let small_bank = small1.tilings[layer].get(0, 0).bank;
        let mut tiles = vec![Tile { bank: 0, coefficient: 0 }; lt.rows * lt.cols];

        // Existing tiles first, so new tiles can find their donors.
        for (idx, lt_tile) in lt.tiles.iter().enumerate() {
            if let TileSource::Existing { net } = lt_tile.source {
                let src = &nets[net].coefficients[nets[net].tilings[layer].get(0, 0).coefficient];
                tiles[idx] = Tile {
                    bank: net * per_net + small_bank,
                    coefficient: coefficients.len(),
                };
                coefficients.push(CoefficientVector::new(layer, idx, src.alpha.clone(), src.trainable));
            }
        }

        // New tiles, grouped by the bank they read so orthogonalization sees
        // the whole per-(layer, bank) set at once.
        for net in 0..nets.len() {
            let new_idx: Vec<usize> = (0..lt.tiles.len())
                .filter(|&i| lt.tiles[i].source == TileSource::New && lt.tiles[i].bank_net == net)
                .collect();
            if new_idx.is_empty() {
                continue;
            }
            let (dr, dc) = lt.tiles[new_idx[0]].donor;
            let donor = &coefficients[tiles[dr * lt.cols + dc].coefficient];
            let (donor_alpha, trainable) = (donor.alpha.clone(), donor.trainable);
            let bank_id = net * per_net + small_bank;
            if plan.strategy == Strategy::BaselineRandomWeights {
                let fan_in = spec.weight_shape(layer)[1..].iter().product::<usize>();
                for &idx in &new_idx {
                    let bank = random_weight_bank(banks.len(), &banks[bank_id], layer, fan_in, &mut rng)?;
                    tiles[idx] = Tile {
                        bank: banks.len(),
                        coefficient: coefficients.len(),
                    };
                    banks.push(bank);
                    coefficients.push(CoefficientVector::new(layer, idx, vec![T::one()], false));
                }
                continue;
            }
            let alphas = init_new_coefficients(plan.strategy, &banks[bank_id], &donor_alpha, new_idx.len(), &mut rng)
                .map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("layer {layer}: {msg}")),
                    e => e,
                })?;
            for (&idx, alpha) in new_idx.iter().zip(alphas) {
                tiles[idx] = Tile {
                    bank: bank_id,
                    coefficient: coefficients.len(),
                };
                coefficients.push(CoefficientVector::new(layer, idx, alpha, trainable));
            }
        }
        tilings.push(TileGrid {
            rows: lt.rows,
            cols: lt.cols,
            tiles,
        });
    }

    let biases = grown_biases(&nets, &spec, &layout)?;
    let norms = grown_norms(&nets, &spec)?;
    let mut model = Model {
        spec,
        sharing: small1.sharing.clone(),
        banks,
        coefficients,
        tilings,
        biases,
        norms,
        seed,
    };
    if plan.rescale_last && plan.g > 1 {
        let last = model.spec.last_layer();
        let s = T::one() / T::of(plan.g as f64);
        for tile in model.tilings[last].tiles.clone() {
            model.coefficients[tile.coefficient].alpha.iter_mut().for_each(|a| *a = *a * s);
        }
        if let Some(b) = model.biases[last].as_mut() {
            b.scale(s);
        }
    }
    model.check_consistency()?;
    Ok(model)
}

/// A one-template bank holding freshly initialized weights for one tile,
/// scaled for the grown layer's fan-in.
fn random_weight_bank<T: Scalar>(
    id: usize,
    like: &TemplateBank<T>,
    layer: usize,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TemplateBank<T>> {
    let shape = like.template_shape.clone();
    let tile_fan_in: usize = shape[1..].iter().product();
    let mut w: Tensor<T> = he_uniform(&shape, rng);
    w.scale(T::of((tile_fan_in as f64 / fan_in as f64).sqrt()));
    TemplateBank::new(id, shape, vec![w], vec![layer])
}

fn grown_biases<T: Scalar>(
    nets: &[&Model<T>],
    spec: &NetworkSpec,
    layout: &TilingLayout,
) -> Result<Vec<Option<Tensor<T>>>> {
    let last = spec.last_layer();
    (0..spec.layers.len())
        .map(|layer| {
            let Some(first) = nets[0].biases[layer].as_ref() else {
                return Ok(None);
            };
            let rows = layout.layers[layer].rows;
            if layer == last || rows == 1 {
                // Output width is fixed: fused logits add both nets' biases.
                let mut b = first.clone();
                for net in &nets[1..] {
                    if let Some(other) = net.biases[layer].as_ref() {
                        b.add_scaled(other, T::one());
                    }
                }
                return Ok(Some(b));
            }
            let mut parts: Vec<Tensor<T>> = nets.iter().filter_map(|n| n.biases[layer].clone()).collect();
            while parts.len() < rows {
                parts.push(Tensor::zeros(first.shape()));
            }
            Ok(Some(Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?))
        })
        .collect()
}

fn grown_norms<T: Scalar>(nets: &[&Model<T>], spec: &NetworkSpec) -> Result<Vec<Option<BatchNormParams<T>>>> {
    let channels = spec.bn_channels();
    nets[0]
        .norms
        .iter()
        .zip(channels)
        .enumerate()
        .map(|(stage, (norm, want))| match (norm, want) {
            (None, None) => Ok(None),
            (Some(n), Some(c)) => {
                let have = n.gamma.len();
                if c == have {
                    return Ok(Some(n.clone()));
                }
                let mut parts: Vec<BatchNormParams<T>> = nets.iter().filter_map(|m| m.norms[stage].clone()).collect();
                while parts.len() * have < c {
                    parts.push(BatchNormParams::fresh(have));
                }
                if parts.len() * have != c {
                    return Err(Error::Growth(format!("stage {stage}: cannot grow {have} BN channels to {c}")));
                }
                Ok(Some(BatchNormParams::concat(&parts.iter().collect::<Vec<_>>())?))
            }
            _ => Err(Error::Growth(format!("stage {stage}: batchnorm placement mismatch"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthStepMetrics {
    /// Mean top-1 of the models entering growth, each evaluated on its own.
    pub acc_before: f64,
    pub acc_before_each: Vec<f64>,
    /// Top-1 of the grown model before any training step.
    pub acc_at_growth: f64,
}

pub fn growth_step_metrics<T: Scalar>(
    before: &[&Model<T>],
    after: &Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    batch_size: usize,
) -> Result<GrowthStepMetrics> {
    if before.is_empty() {
        return Err(Error::Growth("no pre-growth model to evaluate".into()));
    }
    let acc_before_each = before
        .iter()
        .map(|m| m.top1_accuracy(images, labels, batch_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(GrowthStepMetrics {
        acc_before: acc_before_each.iter().sum::<f64>() / acc_before_each.len() as f64,
        acc_before_each,
        acc_at_growth: after.top1_accuracy(images, labels, batch_size)?,
    })
}
