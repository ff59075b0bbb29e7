//! Forward and backward passes over a [`Model`]'s stage list.

use serde::{Deserialize, Serialize};

use super::{LayerKind, Model, Stage};
use crate::error::{Error, Result};
use super::model::extract_block;
use crate::numerics::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, relu_backward, relu_forward, softmax_cross_entropy, BatchNormCache, BnMode,
    LayerGrad, Scalar, Tensor,
};
use crate::templates::{accumulate_template_grads, coefficient_grads};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN; running statistics may be updated afterwards.
    Train,
    /// Running statistics in BN.
    Eval,
}

impl From<Mode> for BnMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        }
    }
}

/// Where to capture features during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Capture {
    /// The activation a layer produces (after its ReLU, if any). For the second
    /// convolution of a residual block this is the block output.
    Layer(usize),
    /// The activation fed to the classifier layer.
    ClassifierInput,
}

/// Per-example features, spatially averaged for convolutional activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub capture: Capture,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_activation<T: Scalar>(capture: Capture, act: &Tensor<T>) -> Self {
        let rows = act.rows();
        let (cols, spatial) = match act.shape() {
            [_, c, h, w] => (*c, h * w),
            [_, d] => (*d, 1),
            s => (s[1..].iter().product(), 1),
        };
        let mut data = vec![0.0; rows * cols];
        let scale = 1.0 / spatial as f64;
        for (i, v) in act.data().iter().enumerate() {
            let b = i / (cols * spatial);
            let c = (i / spatial) % cols;
            data[b * cols + c] += v.f64() * scale;
        }
        Self {
            capture,
            rows,
            cols,
            data,
        }
    }

    pub fn new(capture: Capture, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::dim(format!(
                "feature matrix {rows}x{cols} with {} entries",
                data.len()
            )));
        }
        Ok(Self {
            capture,
            rows,
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Concatenates row blocks computed over successive probe batches.
    pub fn stack(parts: Vec<FeatureMatrix>) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("no feature blocks"))?;
        let (capture, cols) = (first.capture, first.cols);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols != cols {
                return Err(Error::dim("feature blocks differ in width"));
            }
            rows += p.rows;
            data.extend(p.data);
        }
        Self::new(capture, rows, cols, data)
    }
}

enum StageCache<T> {
    Flatten {
        shape: Vec<usize>,
    },
    Layer {
        input: Tensor<T>,
        bn: Option<BatchNormCache<T>>,
        output: Option<Tensor<T>>,
    },
    Residual {
        bn: Option<BatchNormCache<T>>,
        h: Tensor<T>,
        u: Tensor<T>,
    },
    Relu {
        output: Tensor<T>,
    },
    Pool {
        shape: Vec<usize>,
    },
}

/// State retained by a forward pass for the backward pass.
pub struct Trace<T> {
    weights: Vec<Tensor<T>>,
    stages: Vec<StageCache<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }
}

pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub features: Vec<FeatureMatrix>,
    pub trace: Trace<T>,
}

/// Gradients mirroring [`Model::param_slots`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub templates: Vec<Vec<Tensor<T>>>,
    pub coefficients: Vec<Vec<T>>,
    pub biases: Vec<Option<Tensor<T>>>,
    /// `(d_gamma, d_beta)` per stage.
    pub norms: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            templates: model.banks.iter().map(|b| b.zero_grads()).collect(),
            coefficients: model
                .coefficients
                .iter()
                .map(|c| vec![T::zero(); c.alpha.len()])
                .collect(),
            biases: model
                .biases
                .iter()
                .map(|b| b.as_ref().map(|b| Tensor::zeros(b.shape())))
                .collect(),
            norms: model
                .norms
                .iter()
                .map(|n| {
                    n.as_ref()
                        .map(|n| (Tensor::zeros(n.gamma.shape()), Tensor::zeros(n.beta.shape())))
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for bank in &self.templates {
            out.extend(bank.iter().map(Tensor::data));
        }
        out.extend(self.coefficients.iter().map(Vec::as_slice));
        out.extend(self.biases.iter().flatten().map(Tensor::data));
        for (g, b) in self.norms.iter().flatten() {
            out.push(g.data());
            out.push(b.data());
        }
        out
    }

    pub fn flatten(&self) -> Vec<T> {
        self.slices().into_iter().flat_map(|s| s.to_vec()).collect()
    }
}

struct CaptureSet<'a> {
    wanted: &'a [Capture],
    out: Vec<FeatureMatrix>,
}

impl CaptureSet<'_> {
    fn offer<T: Scalar>(&mut self, capture: Capture, act: &Tensor<T>) {
        if self.wanted.contains(&capture) {
            self.out.push(FeatureMatrix::from_activation(capture, act));
        }
    }

    fn into_ordered(self) -> Vec<FeatureMatrix> {
        let mut out = self.out;
        let wanted = self.wanted;
        out.sort_by_key(|f| wanted.iter().position(|w| *w == f.capture));
        out
    }
}

impl<T: Scalar> Model<T> {
    fn apply_layer(&self, layer: usize, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let spec = &self.spec.layers[layer];
        let bias = self.biases[layer].as_ref();
        match spec.kind {
            LayerKind::Dense => dense_forward(x, w, bias),
            k => conv2d_forward(x, w, bias, spec.stride, k.padding()),
        }
    }

    fn layer_backward(
        &self,
        layer: usize,
        x: &Tensor<T>,
        w: &Tensor<T>,
        d_out: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        let spec = &self.spec.layers[layer];
        let LayerGrad {
            d_weights,
            d_bias,
            d_input,
        } = match spec.kind {
            LayerKind::Dense => dense_backward(x, w, d_out)?,
            k => conv2d_backward(x, w, d_out, spec.stride, k.padding())?,
        };
        if let (Some(g), Some(d)) = (grads.biases[layer].as_mut(), d_bias) {
            g.add_scaled(&d, T::one());
        }
        let grid = &self.tilings[layer];
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let tile = grid.get(r, c);
                let block = if grid.rows == 1 && grid.cols == 1 {
                    d_weights.clone()
                } else {
                    extract_block(&d_weights, grid, r, c)
                };
                let bank = &self.banks[tile.bank];
                let ga = coefficient_grads(&block, bank)?;
                for (acc, g) in grads.coefficients[tile.coefficient].iter_mut().zip(ga) {
                    *acc = *acc + g;
                }
                accumulate_template_grads(
                    &block,
                    &self.coefficients[tile.coefficient],
                    &mut grads.templates[tile.bank],
                )?;
            }
        }
        Ok(d_input)
    }

    fn norm(&self, stage: usize) -> Result<&super::BatchNormParams<T>> {
        self.norms[stage]
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec(format!("stage {stage} has no batchnorm parameters")))
    }

    /// Runs the network on `batch` (`[B, C, H, W]`), capturing features at
    /// the requested points.
    pub fn forward(
        &self,
        batch: &Tensor<T>,
        mode: Mode,
        capture: &[Capture],
    ) -> Result<ForwardOutput<T>> {
        let [c, h, w] = self.spec.input;
        if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::dim(format!(
                "batch {:?} does not match network input {:?}",
                batch.shape(),
                self.spec.input
            )));
        }
        let weights = self.layer_weights()?;
        let last = self.spec.last_layer();
        let mut captures = CaptureSet {
            wanted: capture,
            out: Vec::new(),
        };
        let mut caches = Vec::with_capacity(self.spec.stages.len());
        let mut x = batch.clone();
        for (si, stage) in self.spec.stages.iter().enumerate() {
            let (next, cache) = match stage {
                Stage::Flatten => {
                    let shape = x.shape().to_vec();
                    let rows = shape[0];
                    let flat = x.reshape(&[rows, shape[1..].iter().product()])?;
                    (flat, StageCache::Flatten { shape })
                }
                Stage::Layer { layer, bn, relu } => {
                    let (input, bn_cache) = if *bn {
                        let p = self.norm(si)?;
                        let (y, cache) = batchnorm_forward(
                            &x,
                            &p.gamma,
                            &p.beta,
                            &p.running_mean,
                            &p.running_var,
                            mode.into(),
                        )?;
                        (y, Some(cache))
                    } else {
                        (x, None)
                    };
                    if *layer == last {
                        captures.offer(Capture::ClassifierInput, &input);
                    }
                    let mut y = self.apply_layer(*layer, &input, &weights[*layer])?;
                    if *relu {
                        y = relu_forward(&y);
                    }
                    captures.offer(Capture::Layer(*layer), &y);
                    let output = relu.then(|| y.clone());
                    (
                        y,
                        StageCache::Layer {
                            input,
                            bn: bn_cache,
                            output,
                        },
                    )
                }
                Stage::Residual {
                    bn,
                    first,
                    second,
                    shortcut,
                } => {
                    let (pre, bn_cache) = if *bn {
                        let p = self.norm(si)?;
                        let (y, cache) = batchnorm_forward(
                            &x,
                            &p.gamma,
                            &p.beta,
                            &p.running_mean,
                            &p.running_var,
                            mode.into(),
                        )?;
                        (y, Some(cache))
                    } else {
                        (x.clone(), None)
                    };
                    let h = relu_forward(&pre);
                    let u = relu_forward(&self.apply_layer(*first, &h, &weights[*first])?);
                    captures.offer(Capture::Layer(*first), &u);
                    let mut out = self.apply_layer(*second, &u, &weights[*second])?;
                    match shortcut {
                        Some(p) => {
                            let skip = self.apply_layer(*p, &h, &weights[*p])?;
                            captures.offer(Capture::Layer(*p), &skip);
                            out.add_scaled(&skip, T::one());
                        }
                        None => out.add_scaled(&x, T::one()),
                    }
                    captures.offer(Capture::Layer(*second), &out);
                    (out, StageCache::Residual { bn: bn_cache, h, u })
                }
                Stage::Relu => {
                    let y = relu_forward(&x);
                    (y.clone(), StageCache::Relu { output: y })
                }
                Stage::GlobalAvgPool => {
                    let shape = x.shape().to_vec();
                    let (b, ch, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
                    let inv = T::one() / T::of(spatial as f64);
                    let mut pooled = Tensor::zeros(&[b, ch]);
                    for (i, chunk) in x.data().chunks(spatial).enumerate() {
                        pooled.data_mut()[i] = chunk.iter().copied().sum::<T>() * inv;
                    }
                    (pooled, StageCache::Pool { shape })
                }
            };
            x = next;
            caches.push(cache);
        }
        let logits = x.ensure_finite("forward")?;
        Ok(ForwardOutput {
            logits,
            features: captures.into_ordered(),
            trace: Trace {
                weights,
                stages: caches,
            },
        })
    }

    /// Backpropagates `d_logits` through the trace of a forward pass.
    pub fn backward(&self, trace: &Trace<T>, d_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = Gradients::zeros_like(self);
        let mut d = d_logits.clone();
        for (si, (stage, cache)) in self.spec.stages.iter().zip(&trace.stages).enumerate().rev() {
            d = match (stage, cache) {
                (Stage::Flatten, StageCache::Flatten { shape }) => d.reshape(shape)?,
                (Stage::Layer { layer, .. }, StageCache::Layer { input, bn, output }) => {
                    if let Some(out) = output {
                        d = relu_backward(out, &d)?;
                    }
                    let mut dx =
                        self.layer_backward(*layer, input, &trace.weights[*layer], &d, &mut grads)?;
                    if let Some(cache) = bn {
                        let p = self.norm(si)?;
                        let (dxn, dg, db) = batchnorm_backward(cache, &p.gamma, &dx)?;
                        accumulate_bn(&mut grads, si, &dg, &db);
                        dx = dxn;
                    }
                    dx
                }
                (
                    Stage::Residual {
                        first,
                        second,
                        shortcut,
                        ..
                    },
                    StageCache::Residual { bn, h, u },
                ) => {
                    let d_u = self.layer_backward(*second, u, &trace.weights[*second], &d, &mut grads)?;
                    let d_u = relu_backward(u, &d_u)?;
                    let mut d_h = self.layer_backward(*first, h, &trace.weights[*first], &d_u, &mut grads)?;
                    let mut d_x = match shortcut {
                        Some(p) => {
                            let d_skip = self.layer_backward(*p, h, &trace.weights[*p], &d, &mut grads)?;
                            d_h.add_scaled(&d_skip, T::one());
                            None
                        }
                        None => Some(d),
                    };
                    let d_pre = relu_backward(h, &d_h)?;
                    let d_in = match bn {
                        Some(cache) => {
                            let p = self.norm(si)?;
                            let (dxn, dg, db) = batchnorm_backward(cache, &p.gamma, &d_pre)?;
                            accumulate_bn(&mut grads, si, &dg, &db);
                            dxn
                        }
                        None => d_pre,
                    };
                    match d_x.as_mut() {
                        Some(dx) => {
                            dx.add_scaled(&d_in, T::one());
                            d_x.unwrap()
                        }
                        None => d_in,
                    }
                }
                (Stage::Relu, StageCache::Relu { output }) => relu_backward(output, &d)?,
                (Stage::GlobalAvgPool, StageCache::Pool { shape }) => {
                    let spatial = shape[2] * shape[3];
                    let inv = T::one() / T::of(spatial as f64);
                    let mut dx = Tensor::zeros(shape);
                    for (i, chunk) in dx.data_mut().chunks_mut(spatial).enumerate() {
                        chunk.fill(d.data()[i] * inv);
                    }
                    dx
                }
                _ => return Err(Error::InvalidSpec(format!("trace does not match stage {si}"))),
            };
        }
        Ok(grads)
    }

    /// Mean cross-entropy on one batch plus the full gradient set.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(T, Gradients<T>, Trace<T>)> {
        let out = self.forward(batch, mode, &[])?;
        let (loss, d_logits) = softmax_cross_entropy(&out.logits, labels)?;
        let grads = self.backward(&out.trace, &d_logits)?;
        Ok((loss, grads, out.trace))
    }

    /// Folds the batch statistics of a train-mode trace into the running BN
    /// estimates.
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        for (norm, cache) in self.norms.iter_mut().zip(&trace.stages) {
            let bn = match cache {
                StageCache::Layer { bn: Some(c), .. } | StageCache::Residual { bn: Some(c), .. } => c,
                _ => continue,
            };
            if let Some(p) = norm {
                bn.update_running(p.running_mean.data_mut(), p.running_var.data_mut());
            }
        }
    }

    /// Eval-mode logits over a large input, computed in chunks.
    pub fn predict(&self, images: &Tensor<T>, batch_size: usize) -> Result<Tensor<T>> {
        let parts = for_each_chunk(images, batch_size, |chunk| {
            Ok(self.forward(chunk, Mode::Eval, &[])?.logits)
        })?;
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    /// Fraction of `labels` matched by the arg-max logit, in eval mode.
    pub fn top1_accuracy(&self, images: &Tensor<T>, labels: &[usize], batch_size: usize) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let logits = self.predict(images, batch_size)?;
        Ok(top1(&logits, labels))
    }

    /// Eval-mode feature capture over a probe set.
    pub fn capture_features(
        &self,
        images: &Tensor<T>,
        captures: &[Capture],
        batch_size: usize,
    ) -> Result<Vec<FeatureMatrix>> {
        let blocks = for_each_chunk(images, batch_size, |chunk| {
            Ok(self.forward(chunk, Mode::Eval, captures)?.features)
        })?;
        let mut per_capture: Vec<Vec<FeatureMatrix>> = vec![Vec::new(); captures.len()];
        for block in blocks {
            if block.len() != captures.len() {
                return Err(Error::InvalidSpec(format!(
                    "requested {} captures, network produced {}",
                    captures.len(),
                    block.len()
                )));
            }
            for (i, f) in block.into_iter().enumerate() {
                per_capture[i].push(f);
            }
        }
        per_capture.into_iter().map(FeatureMatrix::stack).collect()
    }
}

fn accumulate_bn<T: Scalar>(grads: &mut Gradients<T>, stage: usize, dg: &Tensor<T>, db: &Tensor<T>) {
    if let Some((g, b)) = grads.norms[stage].as_mut() {
        g.add_scaled(dg, T::one());
        b.add_scaled(db, T::one());
    }
}

fn for_each_chunk<T: Scalar, R>(
    images: &Tensor<T>,
    batch_size: usize,
    mut f: impl FnMut(&Tensor<T>) -> Result<R>,
) -> Result<Vec<R>> {
    let n = images.rows();
    let per = images.row_len();
    let step = batch_size.max(1);
    let mut out = Vec::with_capacity(n.div_ceil(step));
    for start in (0..n).step_by(step) {
        let end = (start + step).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        out.push(f(&chunk)?);
    }
    Ok(out)
}

pub fn top1<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(b, &label)| {
            let row = logits.row(*b);
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
                .0;
            best == label
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, LayerSpec, NetworkSpec};
    use crate::numerics::{finite_difference_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    fn random_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn perturb(model: &mut Model<f64>, seed: u64) {
        // Move biases, BN and coefficients off their initial values so every
        // gradient path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = model.flat_params();
        for v in &mut flat {
            *v += rng.random_range(-0.2..0.2);
        }
        model.set_flat_params(&flat).unwrap();
    }

    /// Checks `probes` randomly chosen parameters against central differences.
    fn check_gradients(mut model: Model<f64>, batch: &Tensor<f64>, labels: &[usize], probes: usize, seed: u64) {
        let (_, grads, _) = model.loss_and_grads(batch, labels, Mode::Train).unwrap();
        let analytic = grads.flatten();
        let base = model.flat_params();
        assert_eq!(analytic.len(), base.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = if base.len() <= probes {
            (0..base.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, base.len(), probes).into_vec()
        };
        let sub: Vec<f64> = picks.iter().map(|&i| base[i]).collect();
        let numeric = finite_difference_gradient(
            |p| {
                let mut full = base.clone();
                for (&i, &v) in picks.iter().zip(p) {
                    full[i] = v;
                }
                model.set_flat_params(&full).unwrap();
                let out = model.forward(batch, Mode::Train, &[]).unwrap();
                softmax_cross_entropy(&out.logits, labels).unwrap().0
            },
            &sub,
            1e-5,
        )
        .unwrap();
        for (k, &i) in picks.iter().enumerate() {
            let err = relative_error(analytic[i], numeric[k]);
            assert!(err < 1e-4, "param {i}: analytic {} numeric {} (rel {err})", analytic[i], numeric[k]);
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut model = build_model::<f64>(&mlp(&[8, 8, 8, 4]), 2, seed).unwrap();
            perturb(&mut model, seed + 100);
            let batch = random_batch(&[5, 8, 1, 1], seed);
            check_gradients(model, &batch, &[0, 1, 2, 3, 1], 400, seed);
        }
    }

    #[test]
    fn shared_bank_gradients_match_finite_differences() {
        let spec = mlp(&[6, 8, 8, 8, 3]);
        let model = build_model::<f64>(&spec, 2, 3).unwrap();
        assert!(model.sharing.groups.iter().any(|g| g.len() == 2));
        let mut model = model;
        perturb(&mut model, 9);
        check_gradients(model, &random_batch(&[4, 6, 1, 1], 1), &[0, 1, 2, 0], 600, 2);
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        let spec = NetworkSpec::preset("cnn-mnist", [1, 8, 8], 3).unwrap();
        let mut model = build_model::<f64>(&spec, 2, 4).unwrap();
        perturb(&mut model, 5);
        check_gradients(model, &random_batch(&[4, 1, 8, 8], 6), &[0, 1, 2, 1], 150, 7);
    }

    #[test]
    fn wrn_gradients_match_finite_differences() {
        let spec = NetworkSpec::preset("wrn-mini-cifar", [3, 8, 8], 4).unwrap();
        let mut model = build_model::<f64>(&spec, 2, 8).unwrap();
        perturb(&mut model, 9);
        check_gradients(model, &random_batch(&[3, 3, 8, 8], 10), &[0, 3, 1], 150, 11);
    }

    #[test]
    fn zero_classifier_gives_log_k_loss() {
        let spec = mlp(&[4, 6, 5]);
        let mut model = build_model::<f64>(&spec, 2, 0).unwrap();
        let last = model.tilings[1].get(0, 0).bank;
        for t in &mut model.banks[last].templates {
            t.fill(0.0);
        }
        let out = model.forward(&random_batch(&[3, 4, 1, 1], 0), Mode::Eval, &[]).unwrap();
        let (loss, _) = softmax_cross_entropy(&out.logits, &[0, 1, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_give_duplicated_logits() {
        let spec = NetworkSpec::preset("cnn-mnist", [1, 8, 8], 3).unwrap();
        let model = build_model::<f32>(&spec, 2, 1).unwrap();
        let one = random_batch(&[1, 1, 8, 8], 3).cast::<f32>();
        let two = Tensor::concat_rows(&[&one, &one]).unwrap();
        let logits = model.forward(&two, Mode::Eval, &[]).unwrap().logits;
        assert_eq!(logits.row(0), logits.row(1));
    }

    #[test]
    fn forwards_are_referentially_transparent() {
        let spec = NetworkSpec::preset("wrn-mini-cifar", [3, 8, 8], 4).unwrap();
        let model = build_model::<f32>(&spec, 2, 2).unwrap();
        let x = random_batch(&[4, 3, 8, 8], 4).cast::<f32>();
        let a = model.forward(&x, Mode::Train, &[]).unwrap().logits;
        let b = model.forward(&x, Mode::Train, &[]).unwrap().logits;
        assert_eq!(a, b);
    }

    #[test]
    fn classifier_capture_reproduces_logits() {
        for name in ["mlp-blobs", "cnn-mnist", "wrn-mini-cifar"] {
            let input = if name == "mlp-blobs" { [2, 1, 1] } else { [3, 8, 8] };
            let spec = NetworkSpec::preset(name, input, 4).unwrap();
            let mut model = build_model::<f64>(&spec, 2, 5).unwrap();
            perturb(&mut model, 1);
            let x = random_batch(&[std::iter::once(6).chain(input).collect::<Vec<_>>()].concat(), 2);
            let out = model.forward(&x, Mode::Eval, &[Capture::ClassifierInput]).unwrap();
            let feats = &out.features[0];
            let last = spec.last_layer();
            let f = Tensor::new(vec![feats.rows, feats.cols], feats.data.clone()).unwrap();
            let logits = dense_forward(&f, &model.layer_weight(last).unwrap(), model.biases[last].as_ref()).unwrap();
            assert!(logits.max_abs_diff(&out.logits) < 1e-12, "{name}");
        }
    }

    #[test]
    fn captures_follow_request_order_and_pool() {
        let spec = NetworkSpec::preset("wrn-mini-cifar", [3, 8, 8], 4).unwrap();
        let model = build_model::<f32>(&spec, 2, 2).unwrap();
        let x = random_batch(&[5, 3, 8, 8], 4).cast::<f32>();
        let want = [Capture::Layer(7), Capture::Layer(0), Capture::ClassifierInput];
        let feats = model.capture_features(&x, &want, 2).unwrap();
        assert_eq!(feats.len(), 3);
        assert_eq!((feats[0].rows, feats[0].cols), (5, 32));
        assert_eq!((feats[1].rows, feats[1].cols), (5, 8));
        assert_eq!(feats[2].cols, 32);
        assert!(feats.iter().all(|f| f.data.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn running_stats_move_only_when_updated() {
        let spec = NetworkSpec::preset("cnn-mnist", [1, 8, 8], 3).unwrap();
        let mut model = build_model::<f32>(&spec, 2, 2).unwrap();
        let x = random_batch(&[4, 1, 8, 8], 4).cast::<f32>();
        let before = model.norms.clone();
        let out = model.forward(&x, Mode::Train, &[]).unwrap();
        assert_eq!(model.norms, before);
        model.update_running_stats(&out.trace);
        assert_ne!(model.norms, before);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let model = build_model::<f32>(&mlp(&[4, 6, 3]), 2, 0).unwrap();
        assert!(model.forward(&Tensor::zeros(&[2, 5, 1, 1]), Mode::Eval, &[]).is_err());
    }

    #[test]
    fn top1_counts_argmax_hits() {
        let logits = Tensor::<f64>::from_rows(&[&[0.0, 2.0], &[3.0, 1.0], &[0.0, 1.0]]).unwrap();
        assert!((top1(&logits, &[1, 0, 0]) - 2.0 / 3.0).abs() < 1e-12);
    }
}
