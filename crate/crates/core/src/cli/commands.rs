use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{DatasetChoice, ExperimentConfig};
use crate::analysis::{cka_between_layers, cka_over_checkpoints, probe_set, CkaMatrix};
use crate::data::{load_cifar10_binary, load_idx, make_synthetic, standardize_pair, Render, Split};
use crate::error::{Error, Result};
use crate::flops::{model_forward_macs, template_mixing_macs, Budget};
use crate::growth::{grow, growth_step_metrics, GrowthStepMetrics};
use crate::network::{Model, NetworkSpec};
use crate::trainer::{
    run_growth_experiment_observed, target_macs, train_observed, train_small_observed, EpochObserver, Phase,
    Splits, TrainConfig, TrainState,
};

const PROBE_SEED_SALT: u64 = 0xC4A;

pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let dir = || {
        cfg.data_dir
            .clone()
            .ok_or_else(|| Error::Config(format!("dataset `{}` needs `data_dir`", cfg.dataset.name())))
    };
    let (mut train, mut test) = match cfg.dataset {
        DatasetChoice::Blobs | DatasetChoice::BlobsRaster => {
            let render = if cfg.dataset == DatasetChoice::Blobs {
                Render::Vector
            } else {
                Render::Raster
            };
            make_synthetic(cfg.classes, cfg.n_per_class, cfg.noise, cfg.data_seed, render)?.split_off(cfg.test_size)?
        }
        DatasetChoice::Mnist => {
            let d = dir()?;
            (
                load_idx(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte"), Split::Train)?,
                load_idx(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte"), Split::Test)?,
            )
        }
        DatasetChoice::Cifar10 => load_cifar10_binary(&dir()?)?,
    };
    if let Some(n) = cfg.train_subset {
        train = train.subset(n, cfg.data_seed)?;
    }
    standardize_pair(&mut train, &mut test)?;
    Splits::new(train, test)
}

pub fn small_spec(cfg: &ExperimentConfig, data: &Splits) -> Result<NetworkSpec> {
    NetworkSpec::preset(&cfg.preset, data.train.example_shape(), data.train.class_count)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ckpt_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.run_dir().join("ckpt").join(format!("{name}.mxgw"))
}

fn epoch_checkpoints<'a>(cfg: &'a ExperimentConfig, train: &'a TrainConfig) -> Box<EpochObserver<'a>> {
    Box::new(move |state: &TrainState| {
        if cfg.checkpoint_every == 0 || !state.epoch.is_multiple_of(cfg.checkpoint_every) {
            return Ok(());
        }
        let global = state.epoch_base + state.epoch - 1;
        let name = format!("{}-e{global:04}", state.phase.name());
        save_checkpoint(
            &ckpt_path(cfg, &name),
            &Checkpoint {
                config: train.clone(),
                state: state.clone(),
            },
        )
    })
}

fn growth_csv(m: &GrowthStepMetrics) -> String {
    let each: Vec<String> = m.acc_before_each.iter().map(f64::to_string).collect();
    format!(
        "acc_before,acc_at_growth,acc_before_each\n{},{},{}\n",
        m.acc_before,
        m.acc_at_growth,
        each.join(";")
    )
}

pub fn cmd_train_small(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let (state, train) = if let Some(path) = &cfg.resume {
        let ckpt = load_checkpoint(path)?;
        if ckpt.config != cfg.train {
            warn!("resuming with the training settings stored in {}", path.display());
        }
        let mut state = ckpt.state;
        if state.phase != Phase::Small {
            return Err(Error::Config(format!(
                "{} holds a {} phase, not a small-net run",
                path.display(),
                state.phase.name()
            )));
        }
        let mut observer = epoch_checkpoints(cfg, &ckpt.config);
        let until = state.phase_epochs;
        train_observed(&mut state, &data, &ckpt.config, until, &mut *observer)?;
        drop(observer);
        (state, ckpt.config)
    } else {
        let spec = small_spec(cfg, &data)?;
        let mut observer = epoch_checkpoints(cfg, &cfg.train);
        let state = train_small_observed(&spec, &data, &cfg.train, cfg.train.seed, &mut *observer)?;
        drop(observer);
        (state, cfg.train.clone())
    };
    let dir = cfg.run_dir();
    write(&dir.join("history.csv"), &state.history.to_csv())?;
    write(&dir.join("flops.csv"), &model_forward_macs(&state.model.spec)?.to_csv())?;
    println!(
        "small net trained: test top-1 {:.4}",
        state.history.final_top1().unwrap_or(f64::NAN)
    );
    save_checkpoint(&ckpt_path(cfg, "small"), &Checkpoint { config: train, state })
}

pub fn cmd_grow(cfg: &ExperimentConfig) -> Result<()> {
    let plan = &cfg.train.growth;
    let path1 = cfg
        .small1
        .as_ref()
        .ok_or_else(|| Error::Config("grow needs `small1`".into()))?;
    let small1 = load_checkpoint(path1)?.state.model;
    let small2 = match (&cfg.small2, plan.fusion) {
        (Some(p), true) => Some(load_checkpoint(p)?.state.model),
        (None, true) => return Err(Error::Config("fusion needs `small2`".into())),
        (Some(_), false) => {
            warn!("`small2` ignored without fusion");
            None
        }
        (None, false) => None,
    };
    let grown = grow(&small1, small2.as_ref(), plan, cfg.train.seed.wrapping_add(0x3))?;
    let data = load_data(cfg)?;
    let before: Vec<&Model<f32>> = std::iter::once(&small1).chain(small2.as_ref()).collect();
    let metrics = growth_step_metrics(&before, &grown, &data.test.images, &data.test.labels, 256)?;
    println!(
        "grown with {} init: test top-1 {:.4} before, {:.4} after",
        plan.strategy.name(),
        metrics.acc_before,
        metrics.acc_at_growth
    );
    let dir = cfg.run_dir();
    write(&dir.join("growth.csv"), &growth_csv(&metrics))?;
    let target = target_macs(&small1.spec, plan, data.train.len(), cfg.train.epochs)?;
    let state = TrainState::new(grown, Budget::with_norm(target, cfg.train.budget_norm)?, Phase::Grown, 0);
    save_checkpoint(
        &ckpt_path(cfg, "grown"),
        &Checkpoint {
            config: cfg.train.clone(),
            state,
        },
    )
}

pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let small1 = match &cfg.small1 {
        Some(p) => load_checkpoint(p)?.state.model,
        None => {
            info!("training the first small net");
            let spec = small_spec(cfg, &data)?;
            let state = train_small_observed(&spec, &data, &cfg.train, cfg.train.seed, &mut |_| Ok(()))?;
            write(&cfg.run_dir().join("small1_history.csv"), &state.history.to_csv())?;
            let model = state.model.clone();
            save_checkpoint(
                &ckpt_path(cfg, "small1"),
                &Checkpoint {
                    config: cfg.train.clone(),
                    state,
                },
            )?;
            model
        }
    };
    let mut observer = epoch_checkpoints(cfg, &cfg.train);
    let out = run_growth_experiment_observed(&cfg.train, &small1, &data, &mut *observer)?;
    drop(observer);
    let dir = cfg.run_dir();
    write(&dir.join("history.csv"), &out.history.to_csv())?;
    if let Some(m) = &out.history.growth_metrics {
        write(&dir.join("growth.csv"), &growth_csv(m))?;
    }
    write(&dir.join("flops.csv"), &model_forward_macs(&out.model.spec)?.to_csv())?;
    println!(
        "grown net: test top-1 {:.4} at FLOPs norm {:.4}",
        out.history.final_top1().unwrap_or(f64::NAN),
        crate::flops::flops_norm(&out.budget)?
    );
    let epochs = out.history.records.len();
    let mut state = TrainState::new(out.model, out.budget, Phase::Grown, 0);
    state.history = out.history;
    state.epoch_base = epochs;
    save_checkpoint(
        &ckpt_path(cfg, "grown"),
        &Checkpoint {
            config: cfg.train.clone(),
            state,
        },
    )
}

fn write_matrix(dir: &Path, name: &str, m: &CkaMatrix) -> Result<()> {
    write(&dir.join(format!("{name}.csv")), &m.to_csv())?;
    write(&dir.join(format!("{name}.pgm")), &m.to_pgm())
}

/// Epoch checkpoints under the run's `ckpt` directory, in name order.
fn saved_epoch_checkpoints(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.run_dir().join("ckpt");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "mxgw")
                && p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| s.contains("-e"))
        })
        .collect();
    paths.sort_by_key(|p| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let epoch = stem.rsplit("-e").next().and_then(|e| e.parse::<usize>().ok());
        (epoch, stem)
    });
    Ok(paths)
}

pub fn cmd_analyze_cka(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let probe = probe_set(&data.test, cfg.probe_size, cfg.data_seed ^ PROBE_SEED_SALT)?;
    let out = cfg.run_dir().join("cka");
    let mut wrote = false;

    let paths = if cfg.checkpoints.is_empty() && cfg.model_a.is_none() {
        saved_epoch_checkpoints(cfg)?
    } else {
        cfg.checkpoints.clone()
    };
    if !paths.is_empty() {
        let models = paths
            .iter()
            .map(|p| load_checkpoint(p).map(|c| c.state.model))
            .collect::<Result<Vec<_>>>()?;
        let layer = cfg
            .cka_layer
            .unwrap_or_else(|| models[0].spec.layers.len().saturating_sub(2));
        let labelled: Vec<(String, &Model<f32>)> = paths
            .iter()
            .zip(&models)
            .map(|(p, m)| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), m))
            .collect();
        let m = cka_over_checkpoints(&labelled, layer, &probe)?;
        write_matrix(&out, &format!("over_time_layer{layer}"), &m)?;
        println!("CKA over {} checkpoints at layer {layer} written", labelled.len());
        wrote = true;
    }
    if let (Some(a), Some(b)) = (&cfg.model_a, &cfg.model_b) {
        let (ma, mb) = (load_checkpoint(a)?.state.model, load_checkpoint(b)?.state.model);
        let m = cka_between_layers(&ma, &mb, &probe)?;
        write_matrix(&out, "between_layers", &m)?;
        println!("CKA between layers written");
        wrote = true;
    }
    if !wrote {
        return Err(Error::Config(
            "nothing to analyze: give `checkpoints` or `model_a` and `model_b`".into(),
        ));
    }
    Ok(())
}

pub fn cmd_flops(cfg: &ExperimentConfig) -> Result<()> {
    let input = match cfg.dataset {
        DatasetChoice::Blobs => [2, 1, 1],
        DatasetChoice::BlobsRaster => [1, 8, 8],
        DatasetChoice::Mnist => [1, 28, 28],
        DatasetChoice::Cifar10 => [3, 32, 32],
    };
    let classes = match cfg.dataset {
        DatasetChoice::Blobs | DatasetChoice::BlobsRaster => cfg.classes,
        _ => 10,
    };
    let small = NetworkSpec::preset(&cfg.preset, input, classes)?;
    let full = small.widened(cfg.train.growth.g.max(2));
    let (rs, rf) = (model_forward_macs(&small)?, model_forward_macs(&full)?);
    let model = Model::<f32>::build(&small, cfg.train.model_options(), 0)?;
    let dir = cfg.run_dir();
    write(&dir.join("flops.csv"), &rs.to_csv())?;
    write(&dir.join("flops_target.csv"), &rf.to_csv())?;
    println!("preset {} on {:?}", cfg.preset, input);
    println!("small forward MACs/example  {}", rs.forward_macs_per_example);
    println!("target forward MACs/example {}", rf.forward_macs_per_example);
    println!(
        "ratio {:.4}",
        rs.forward_macs_per_example as f64 / rf.forward_macs_per_example as f64
    );
    println!("template mixing MACs/pass   {}", template_mixing_macs(&model));
    Ok(())
}
