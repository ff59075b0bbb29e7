//! Linear centered kernel alignment between captured feature matrices.

use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Capture, FeatureMatrix, Model};
use crate::numerics::{Scalar, Tensor};

pub const PROBE_SIZE: usize = 512;
const PROBE_BATCH: usize = 256;

/// Subtracts each column's mean, in place.
pub fn center_columns(rows: usize, cols: usize, data: &mut [f64]) {
    for c in 0..cols {
        let mean = (0..rows).map(|r| data[r * cols + c]).sum::<f64>() / rows as f64;
        for r in 0..rows {
            data[r * cols + c] -= mean;
        }
    }
}

/// Squared Frobenius norm of `Aᵀ B` for row-major `A: n×p`, `B: n×q`.
fn cross_norm_sq(n: usize, a: &[f64], p: usize, b: &[f64], q: usize) -> f64 {
    (0..p)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; q];
            for r in 0..n {
                let ai = a[r * p + i];
                for (acc, &bj) in row.iter_mut().zip(&b[r * q..(r + 1) * q]) {
                    *acc += ai * bj;
                }
            }
            row.iter().map(|v| v * v).sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

/// `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)` after column-centering both.
/// Returns 0 when either input has no variance.
pub fn linear_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::dim(format!(
            "feature matrices have {} and {} rows",
            x.rows, y.rows
        )));
    }
    let n = x.rows;
    if n < 2 {
        return Err(Error::dim("CKA needs at least two probe examples"));
    }
    if x.data.iter().chain(&y.data).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CKA features"));
    }
    let (mut xc, mut yc) = (x.data.clone(), y.data.clone());
    center_columns(n, x.cols, &mut xc);
    center_columns(n, y.cols, &mut yc);
    let xx = cross_norm_sq(n, &xc, x.cols, &xc, x.cols).sqrt();
    let yy = cross_norm_sq(n, &yc, y.cols, &yc, y.cols).sqrt();
    if xx == 0.0 || yy == 0.0 {
        warn!("CKA of constant features is undefined; reporting 0");
        return Ok(0.0);
    }
    let xy = cross_norm_sq(n, &xc, x.cols, &yc, y.cols);
    Ok(xy / (xx * yy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major.
    pub values: Vec<f64>,
}

impl CkaMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.col_labels.len() + c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            out.push_str(label);
            for c in 0..self.col_labels.len() {
                let _ = write!(out, ",{}", self.get(r, c));
            }
            out.push('\n');
        }
        out
    }

    /// Plain grayscale heatmap, one pixel per cell, white = 1.
    pub fn to_pgm(&self) -> String {
        let (h, w) = (self.row_labels.len(), self.col_labels.len());
        let mut out = format!("P2\n{w} {h}\n255\n");
        for r in 0..h {
            let row: Vec<String> = (0..w)
                .map(|c| ((self.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

fn cross_matrix(
    rows: &[FeatureMatrix],
    cols: &[FeatureMatrix],
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    symmetric: bool,
) -> Result<CkaMatrix> {
    let n = cols.len();
    let mut values = (0..rows.len() * n)
        .into_par_iter()
        .map(|i| {
            let (r, c) = (i / n, i % n);
            if symmetric && c < r {
                Ok(0.0)
            } else {
                linear_cka(&rows[r], &cols[c])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if symmetric {
        for r in 0..rows.len() {
            for c in 0..r {
                values[r * n + c] = values[c * n + r];
            }
        }
    }
    Ok(CkaMatrix {
        row_labels,
        col_labels,
        values,
    })
}

/// A seeded subset of `test` used as the shared probe for every comparison.
pub fn probe_set(test: &Dataset, size: usize, seed: u64) -> Result<Tensor<f32>> {
    Ok(test.subset(size, seed)?.images)
}

/// Pairwise CKA of one layer's features across checkpoints. Layer ids are
/// positional, so they carry over growth unchanged.
pub fn cka_over_checkpoints<T: Scalar>(
    checkpoints: &[(String, &Model<T>)],
    layer: usize,
    probe: &Tensor<T>,
) -> Result<CkaMatrix> {
    if checkpoints.len() < 2 {
        return Err(Error::Config("CKA over time needs at least two checkpoints".into()));
    }
    let mut features = Vec::with_capacity(checkpoints.len());
    for (label, model) in checkpoints {
        if layer >= model.spec.layers.len() {
            return Err(Error::Config(format!(
                "checkpoint {label} has no layer {layer} ({} layers)",
                model.spec.layers.len()
            )));
        }
        let mut f = model.capture_features(probe, &[Capture::Layer(layer)], PROBE_BATCH)?;
        features.push(f.remove(0));
    }
    let labels: Vec<String> = checkpoints.iter().map(|(l, _)| l.clone()).collect();
    cross_matrix(&features, &features, labels.clone(), labels, true)
}

fn all_layers<T: Scalar>(model: &Model<T>, probe: &Tensor<T>) -> Result<Vec<FeatureMatrix>> {
    let captures: Vec<Capture> = (0..model.spec.layers.len()).map(Capture::Layer).collect();
    model.capture_features(probe, &captures, PROBE_BATCH)
}

/// CKA between every layer of `a` and every layer of `b` on a shared probe.
pub fn cka_between_layers<T: Scalar>(a: &Model<T>, b: &Model<T>, probe: &Tensor<T>) -> Result<CkaMatrix> {
    let (fa, fb) = (all_layers(a, probe)?, all_layers(b, probe)?);
    let labels = |n: usize| (0..n).map(|i| format!("layer{i}")).collect::<Vec<_>>();
    cross_matrix(&fa, &fb, labels(fa.len()), labels(fb.len()), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_model;
    use crate::network::NetworkSpec;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        FeatureMatrix::new(Capture::ClassifierInput, rows, cols, data).unwrap()
    }

    /// Centered HSIC through n×n Gram matrices: tr(K H L H).
    fn hsic(x: &FeatureMatrix, y: &FeatureMatrix) -> f64 {
        let n = x.rows;
        let gram = |m: &FeatureMatrix| -> Vec<f64> {
            let mut g = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                }
            }
            g
        };
        let h = |i: usize, j: usize| f64::from(u8::from(i == j)) - 1.0 / n as f64;
        let center = |g: &[f64]| -> Vec<f64> {
            let mut t = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    t[i * n + j] = (0..n).map(|k| g[i * n + k] * h(k, j)).sum();
                }
            }
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = (0..n).map(|k| h(i, k) * t[k * n + j]).sum();
                }
            }
            out
        };
        let (kc, lc) = (center(&gram(x)), center(&gram(y)));
        (0..n)
            .map(|i| (0..n).map(|k| kc[i * n + k] * lc[k * n + i]).sum::<f64>())
            .sum()
    }

    fn brute_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> f64 {
        hsic(x, y) / (hsic(x, x) * hsic(y, y)).sqrt()
    }

    fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..2 {
                for u in &q {
                    let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            q.push(v.iter().map(|a| a / norm).collect());
        }
        q.concat()
    }

    fn matmul(x: &FeatureMatrix, q: &[f64], d: usize) -> FeatureMatrix {
        let mut data = vec![0.0; x.rows * d];
        for r in 0..x.rows {
            for j in 0..d {
                data[r * d + j] = (0..x.cols).map(|k| x.data[r * x.cols + k] * q[k * d + j]).sum();
            }
        }
        FeatureMatrix::new(x.capture, x.rows, d, data).unwrap()
    }

    #[test]
    fn agrees_with_gram_hsic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (x, y) = (random(20, 5, &mut rng), random(20, 5, &mut rng));
            let (a, b) = (linear_cka(&x, &y).unwrap(), brute_cka(&x, &y));
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn self_similarity_and_orthogonal_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let x = random(30, 6, &mut rng);
            assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
            let q = orthogonal(6, &mut rng);
            let xq = matmul(&x, &q, 6);
            assert!((linear_cka(&x, &xq).unwrap() - 1.0).abs() < 1e-8);
            let y = random(30, 4, &mut rng);
            assert!((linear_cka(&xq, &y).unwrap() - linear_cka(&x, &y).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_features_give_zero() {
        let c = FeatureMatrix::new(Capture::Layer(0), 4, 2, vec![3.0; 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(linear_cka(&c, &c).unwrap(), 0.0);
        assert_eq!(linear_cka(&c, &random(4, 3, &mut rng)).unwrap(), 0.0);
    }

    #[test]
    fn row_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(linear_cka(&random(4, 2, &mut rng), &random(5, 2, &mut rng)).is_err());
    }

    #[test]
    fn permuting_rows_lowers_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(64, 8, &mut rng);
        let mut data = Vec::new();
        for r in (0..64).rev() {
            data.extend_from_slice(x.row((r * 7) % 64));
        }
        let shuffled = FeatureMatrix::new(x.capture, 64, 8, data).unwrap();
        assert!(linear_cka(&x, &shuffled).unwrap() < 0.5);
    }

    proptest! {
        #[test]
        fn bounded_and_scale_invariant(seed in 0u64..500, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, y) = (random(12, 3, &mut rng), random(12, 4, &mut rng));
            let v = linear_cka(&x, &y).unwrap();
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&v));
            let scaled = FeatureMatrix::new(x.capture, 12, 3, x.data.iter().map(|a| a * scale).collect()).unwrap();
            prop_assert!((linear_cka(&scaled, &y).unwrap() - v).abs() < 1e-8);
        }

        #[test]
        fn centering_is_idempotent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(10, 3, &mut rng);
            let mut once = x.data.clone();
            center_columns(10, 3, &mut once);
            let mut twice = once.clone();
            center_columns(10, 3, &mut twice);
            prop_assert!(once.iter().zip(&twice).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }

    fn probe() -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Tensor::from_fn(&[40, 2, 1, 1], |_| rng.sample::<f32, _>(StandardNormal))
    }

    #[test]
    fn identical_checkpoints_give_ones() {
        let spec = NetworkSpec::preset("mlp-blobs", [2, 1, 1], 4).unwrap();
        let m = build_model::<f32>(&spec, 2, 1).unwrap();
        let other = build_model::<f32>(&spec, 2, 2).unwrap();
        let cks = vec![("a".to_string(), &m), ("b".to_string(), &m), ("c".to_string(), &other)];
        let mat = cka_over_checkpoints(&cks, 1, &probe()).unwrap();
        assert!((mat.get(0, 1) - 1.0).abs() < 1e-6);
        for r in 0..3 {
            assert!((mat.get(r, r) - 1.0).abs() < 1e-6);
            for c in 0..3 {
                assert_eq!(mat.get(r, c), mat.get(c, r));
            }
        }
        assert!(cka_over_checkpoints(&cks, 9, &probe()).is_err());
        assert!(cka_over_checkpoints(&cks[..1], 0, &probe()).is_err());
        assert_eq!(mat.to_csv().lines().next().unwrap(), "label,a,b,c");
        assert!(mat.to_pgm().starts_with("P2\n3 3\n255\n"));
    }

    #[test]
    fn same_model_layers_have_unit_diagonal() {
        let spec = NetworkSpec::preset("mlp-blobs", [2, 1, 1], 4).unwrap();
        let m = build_model::<f32>(&spec, 2, 1).unwrap();
        let mat = cka_between_layers(&m, &m, &probe()).unwrap();
        let n = spec.layers.len();
        assert_eq!(mat.values.len(), n * n);
        for i in 0..n {
            assert!((mat.get(i, i) - 1.0).abs() < 1e-6);
        }
    }
}
