//! Runs a configured experiment for every seed and writes its artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fastat_core::attacks::AttackSpec;
use fastat_core::checkpoint;
use fastat_core::data::{load_cifar10_bin, subset, synth_blobs};
use fastat_core::training::{train_observed, GRADALIGN_MODE};
use fastat_core::{
    build_small_cnn, detect_co, evaluate, local_linearity, noise_sensitivity_profile, Dataset, Model, RunHistory,
    SensitivityProfile,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, EvalConfig, RunConfig};
use crate::report::{MetricSummary, Summary};

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

pub struct Datasets {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Directory holding the CIFAR-10 batch files: `root` itself or its
/// `cifar-10-batches-bin` child.
pub fn cifar_dir(root: &Path) -> Result<PathBuf> {
    for dir in [root.to_path_buf(), root.join("cifar-10-batches-bin")] {
        if dir.join(TEST_FILE).is_file() {
            return Ok(dir);
        }
    }
    bail!(
        "no CIFAR-10 binary batches ({TEST_FILE}, data_batch_*.bin) under {}",
        root.display()
    )
}

pub fn load_data(cfg: &DataConfig) -> Result<Datasets> {
    match cfg {
        DataConfig::Cifar10 {
            root,
            train_examples,
            eval_examples,
            subset_seed,
        } => {
            let root = root.as_ref().context("CIFAR-10 data root not set")?;
            let dir = cifar_dir(root)?;
            let train_paths: Vec<PathBuf> = TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
            let mut train = load_cifar10_bin(&train_paths)?;
            let mut eval = load_cifar10_bin(&[dir.join(TEST_FILE)])?;
            if let Some(n) = train_examples {
                train = subset(&train, *n, *subset_seed)?;
            }
            if let Some(n) = eval_examples {
                eval = subset(&eval, *n, subset_seed.wrapping_add(1))?;
            }
            Ok(Datasets { train, eval })
        }
        DataConfig::Synthetic {
            train_examples,
            eval_examples,
            shape,
            classes,
            margin,
            seed,
        } => Ok(Datasets {
            train: synth_blobs(*train_examples, *shape, *classes, *margin, *seed)?,
            eval: synth_blobs(*eval_examples, *shape, *classes, *margin, seed.wrapping_add(0x5eed))?,
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub examples: usize,
    pub eps: f64,
    pub std_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub pgd_steps: usize,
    pub pgd_restarts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub value: f64,
    pub eps: f64,
    pub examples: usize,
    pub noise_draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoReport {
    pub detected: bool,
    pub epoch: Option<usize>,
    pub peak_pgd_acc: Option<f64>,
    pub final_pgd_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTiming {
    pub seed: u64,
    pub train_seconds_per_epoch: Vec<f64>,
    pub mean_train_seconds_per_epoch: f64,
    pub final_eval_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub history: RunHistory,
    pub final_eval: FinalEval,
    pub linearity: LinearityReport,
    pub co: CoReport,
    pub timing: SeedTiming,
    pub model: Model<f32>,
}

fn prefix(data: &Dataset, n: usize) -> Dataset {
    data.select(&(0..n.min(data.len())).collect::<Vec<_>>())
}

/// Final accuracies on a prefix of `eval`: clean, FGSM (`α = ε`) and
/// PGD-`steps`-`restarts` (`α = ε/4`), all clamped to the image range.
pub fn final_evaluation(model: &Model<f32>, eval: &Dataset, cfg: &EvalConfig, eps: f64, seed: u64) -> Result<FinalEval> {
    let held = prefix(eval, cfg.examples);
    let mut rng = eval_rng(seed, 0);
    Ok(FinalEval {
        examples: held.len(),
        eps,
        std_acc: evaluate(model, &held, None, &mut rng)?,
        fgsm_acc: evaluate(model, &held, Some(&AttackSpec::fgsm_eval(eps)), &mut rng)?,
        pgd_acc: evaluate(
            model,
            &held,
            Some(&AttackSpec::pgd_eval(eps, cfg.pgd_steps, cfg.pgd_restarts)),
            &mut rng,
        )?,
        pgd_steps: cfg.pgd_steps,
        pgd_restarts: cfg.pgd_restarts,
    })
}

pub fn linearity_report(model: &Model<f32>, eval: &Dataset, cfg: &EvalConfig, eps: f64, seed: u64) -> Result<LinearityReport> {
    let held = prefix(eval, cfg.linearity_examples);
    let (x, y, _) = held.batch_one_hot::<f32>(&(0..held.len()).collect::<Vec<_>>());
    let value = local_linearity(model, &x, &y, eps, cfg.linearity_noise, &mut eval_rng(seed, 1))?;
    Ok(LinearityReport {
        value,
        eps,
        examples: held.len(),
        noise_draws: cfg.linearity_noise,
    })
}

/// Sensitivity profile averaged over `profile_draws` noise samples.
pub fn profile_report(model: &Model<f32>, eval: &Dataset, cfg: &EvalConfig, eps: f64, seed: u64) -> Result<SensitivityProfile> {
    let held = prefix(eval, cfg.profile_examples);
    let (x, y, _) = held.batch_one_hot::<f32>(&(0..held.len()).collect::<Vec<_>>());
    let mut rng = eval_rng(seed, 2);
    let mut acc: Option<SensitivityProfile> = None;
    for _ in 0..cfg.profile_draws {
        let p = noise_sensitivity_profile(model, &x, &y, eps, &mut rng)?;
        acc = Some(match acc {
            None => p,
            Some(mut a) => {
                a.forward_cos.iter_mut().zip(&p.forward_cos).for_each(|(s, v)| *s += v);
                a.backward_cos.iter_mut().zip(&p.backward_cos).for_each(|(s, v)| *s += v);
                a
            }
        });
    }
    let mut p = acc.expect("profile_draws ≥ 1");
    let n = cfg.profile_draws as f64;
    p.forward_cos.iter_mut().chain(p.backward_cos.iter_mut()).for_each(|v| *v /= n);
    Ok(p)
}

fn eval_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((2 << 32) + stream);
    rng
}

pub fn co_report(cfg: &RunConfig, history: &RunHistory) -> Result<CoReport> {
    if history.is_empty() {
        return Ok(CoReport {
            detected: false,
            epoch: None,
            peak_pgd_acc: None,
            final_pgd_acc: None,
        });
    }
    let v = detect_co(
        &history.epochs(),
        &history.column(|r| r.pgd_acc),
        &history.column(|r| r.fgsm_acc),
        &cfg.co,
    )?;
    Ok(CoReport {
        detected: v.detected,
        epoch: v.epoch,
        peak_pgd_acc: Some(v.peak_pgd_acc),
        final_pgd_acc: Some(v.final_pgd_acc),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Trains and evaluates one seed, writing its artifacts into `dir`.
pub fn run_seed(cfg: &RunConfig, data: &Datasets, seed: u64, dir: &Path, verbose: bool) -> Result<SeedOutcome> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut model = build_small_cnn::<f32>(
        &cfg.model.widths,
        data.train.image_shape(),
        data.train.num_classes(),
        seed,
    )?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let eps = train_cfg.attack.eps;
    let mut log = |r: &fastat_core::EpochRecord, secs: f64| {
        if verbose {
            eprintln!(
                "[{} seed {seed}] epoch {:>3}  loss {:.4}  std {:6.2}  fgsm {:6.2}  pgd {:6.2}  lin {:.3}  ({secs:.1}s)",
                cfg.name, r.epoch, r.train_loss, r.std_acc, r.fgsm_acc, r.pgd_acc, r.local_linearity
            );
        }
    };
    let (history, seconds) = train_observed(&mut model, &data.train, &data.eval, &train_cfg, cfg.method, &mut log)?;

    let started = Instant::now();
    let final_eval = final_evaluation(&model, &data.eval, &cfg.eval, eps, seed)?;
    let eval_seconds = started.elapsed().as_secs_f64();
    let linearity = linearity_report(&model, &data.eval, &cfg.eval, eps, seed)?;
    let profile = profile_report(&model, &data.eval, &cfg.eval, eps, seed)?;
    let co = co_report(cfg, &history)?;

    checkpoint::save(&model, &dir.join("model.ckpt"))?;
    fs::write(dir.join("history.csv"), history.to_csv())?;
    write_json(&dir.join("history.json"), &history)?;
    write_json(&dir.join("final_eval.json"), &final_eval)?;
    write_json(&dir.join("linearity.json"), &linearity)?;
    write_json(&dir.join("profile.json"), &profile)?;
    write_json(&dir.join("co_verdict.json"), &co)?;
    write_json(&dir.join("filters.json"), &model.dump_filters()?)?;
    let timing = SeedTiming {
        seed,
        mean_train_seconds_per_epoch: if seconds.is_empty() {
            0.0
        } else {
            seconds.iter().sum::<f64>() / seconds.len() as f64
        },
        train_seconds_per_epoch: seconds,
        final_eval_seconds: eval_seconds,
    };
    write_json(&dir.join("timing.json"), &timing)?;
    Ok(SeedOutcome {
        seed,
        history,
        final_eval,
        linearity,
        co,
        timing,
        model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub dtype: String,
    pub gradalign_mode: String,
    pub checkpoint_version: u32,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub name: String,
    pub method: String,
    pub mean_train_seconds_per_epoch: f64,
    pub seeds: Vec<SeedTiming>,
}

/// Runs every seed, then writes the effective config, per-run metadata,
/// the across-seed summary and the (separate) timing report.
pub fn run_experiment(cfg: &RunConfig, verbose: bool) -> Result<Vec<SeedOutcome>> {
    let out = cfg.output_dir();
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join("effective_config.toml"), cfg.to_toml()?)?;
    write_json(
        &out.join("meta.json"),
        &RunMeta {
            dtype: "f32".into(),
            gradalign_mode: GRADALIGN_MODE.into(),
            checkpoint_version: checkpoint::VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        },
    )?;
    let data = load_data(&cfg.data)?;
    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        outcomes.push(run_seed(cfg, &data, seed, &out.join(format!("seed_{seed}")), verbose)?);
    }
    let summary = summarize(cfg, &outcomes);
    write_json(&out.join("summary.json"), &summary)?;
    fs::write(out.join("summary.md"), summary.to_markdown())?;
    let per_epoch: Vec<f64> = outcomes.iter().map(|o| o.timing.mean_train_seconds_per_epoch).collect();
    write_json(
        &out.join("timing.json"),
        &RunTiming {
            name: cfg.name.clone(),
            method: method_label(cfg),
            mean_train_seconds_per_epoch: per_epoch.iter().sum::<f64>() / per_epoch.len().max(1) as f64,
            seeds: outcomes.iter().map(|o| o.timing.clone()).collect(),
        },
    )?;
    Ok(outcomes)
}

/// `standard`, `fgsm`, `fgsm+noiseaug`, `pgd+noiseaug`, ...
pub fn method_label(cfg: &RunConfig) -> String {
    let base = serde_json::to_value(cfg.method)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let reg = serde_json::to_value(cfg.train.regularizer)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    if reg == "none" || base == "standard" {
        base
    } else {
        format!("{base}+{reg}")
    }
}

pub fn summarize(cfg: &RunConfig, outcomes: &[SeedOutcome]) -> Summary {
    let metric = |f: &dyn Fn(&SeedOutcome) -> f64| MetricSummary::from_values(outcomes.iter().map(f).collect());
    Summary {
        name: cfg.name.clone(),
        method: method_label(cfg),
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        std_acc: metric(&|o| o.final_eval.std_acc),
        fgsm_acc: metric(&|o| o.final_eval.fgsm_acc),
        pgd_acc: metric(&|o| o.final_eval.pgd_acc),
        local_linearity: metric(&|o| o.linearity.value),
        co_detected: outcomes.iter().filter(|o| o.co.detected).count(),
        pgd_label: format!("PGD-{}-{}", cfg.eval.pgd_steps, cfg.eval.pgd_restarts),
    }
}
