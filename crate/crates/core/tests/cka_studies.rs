use mixgrow::analysis::{cka_between_layers, cka_over_checkpoints, linear_cka, probe_set};
use mixgrow::data::{make_synthetic, standardize_pair, Render};
use mixgrow::growth::GrowthPlan;
use mixgrow::network::{Capture, Model, NetworkSpec};
use mixgrow::numerics::Tensor;
use mixgrow::trainer::{run_growth_experiment_observed, train_small, Phase, Splits, TrainConfig};

fn data(seed: u64) -> Splits {
    let (mut train, mut test) = make_synthetic(6, 150, 0.35, seed, Render::Raster)
        .unwrap()
        .split_off(300)
        .unwrap();
    standardize_pair(&mut train, &mut test).unwrap();
    Splits::new(train, test).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        batch_size: 32,
        epochs: 10,
        budget_norm: 0.5,
        growth: GrowthPlan {
            growth_epoch: 5,
            ..GrowthPlan::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn fused_run_shows_a_phase_change() {
    let d = data(1);
    let spec = NetworkSpec::preset("cnn-mnist", [1, 8, 8], 6).unwrap();
    let small1 = train_small(&spec, &d, &config(), 1).unwrap().model;
    let mut snaps: Vec<(Phase, Model<f32>)> = Vec::new();
    run_growth_experiment_observed(&config(), &small1, &d, &mut |s| {
        snaps.push((s.phase, s.model.clone()));
        Ok(())
    })
    .unwrap();
    let probe = probe_set(&d.test, 256, 0).unwrap();
    let labelled: Vec<(String, &Model<f32>)> = snaps.iter().enumerate().map(|(i, (_, m))| (i.to_string(), m)).collect();
    let last_conv = spec.layers.len() - 2;
    let m = cka_over_checkpoints(&labelled, last_conv, &probe).unwrap();
    let (mut within, mut across) = (Vec::new(), Vec::new());
    for i in 0..snaps.len() {
        for j in 0..i {
            if snaps[i].0 == snaps[j].0 {
                within.push(m.get(i, j));
            } else {
                across.push(m.get(i, j));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!across.is_empty() && !within.is_empty());
    assert!(mean(&within) > mean(&across), "within {} across {}", mean(&within), mean(&across));
}

#[test]
fn independently_trained_nets_align_layer_by_layer() {
    let d = data(2);
    let spec = NetworkSpec::preset("cnn-mnist", [1, 8, 8], 6).unwrap();
    let cfg = config();
    let a = train_small(&spec, &d, &cfg, 10).unwrap().model;
    let b = train_small(&spec, &d, &cfg, 20).unwrap().model;
    let probe = probe_set(&d.test, 256, 0).unwrap();
    let m = cka_between_layers(&a, &b, &probe).unwrap();
    let n = spec.layers.len();
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| m.get(i, j)).sum::<f64>() / (n - 1) as f64;
        assert!(m.get(i, i) > off, "layer {i}: diagonal {} vs off-diagonal mean {off}", m.get(i, i));
    }

    let same = cka_between_layers(&a, &a, &probe).unwrap();
    for i in 0..n {
        assert!((same.get(i, i) - 1.0).abs() < 1e-6);
    }

    // Misaligned probe rows destroy the correspondence.
    let rows = probe.shape()[0];
    let per = probe.row_len();
    let shuffled: Vec<f32> = (0..rows)
        .flat_map(|r| probe.row((r * 7 + 3) % rows).to_vec())
        .collect();
    let shuffled = Tensor::new(probe.shape().to_vec(), shuffled).unwrap();
    assert_eq!(shuffled.data().len(), rows * per);
    let cap = [Capture::Layer(n - 2)];
    let fa = a.capture_features(&probe, &cap, 128).unwrap().remove(0);
    let fb = b.capture_features(&probe, &cap, 128).unwrap().remove(0);
    let fs = b.capture_features(&shuffled, &cap, 128).unwrap().remove(0);
    assert!(linear_cka(&fa, &fs).unwrap() < linear_cka(&fa, &fb).unwrap());
}
