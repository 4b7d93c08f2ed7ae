//! The harness behind each subcommand. Every function here is a pure
//! function of its [`Settings`]; writing the results is left to the caller.

use std::time::Instant;

use anyhow::{bail, Context};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use dbcl::attack::{
    gradient_matching_scenario, property_inference_attack, EstimateRecord, EstimateTracker,
    GmConfig, GmScenario, PiaConfig, PiaMode, PiaReport,
};
use dbcl::data::{load_idx, synth, Dataset, Synth};
use dbcl::fedsim::{run_training, SketchPlan, TrainConfig, TrainOutcome};
use dbcl::model::{Arch, InputShape, Model};
use dbcl::sketch::generate;
use dbcl::{derive_seed, Matrix, SketchSpec, SplitMix64};

use crate::config::{DatasetSpec, ModelKind, Settings};
use crate::theory::{enumeration_checks, monte_carlo_checks, Check};

const DATA_STREAM: u64 = u64::MAX - 16;
const GM_STREAM: u64 = u64::MAX - 17;

/// Train and test sets: the first `n_train` samples and the next `n_test`.
/// For the CNN a flat square input is reshaped to one channel.
pub fn load_data(s: &Settings) -> anyhow::Result<(Dataset, Dataset)> {
    let n = s.n_train + s.n_test;
    let seed = derive_seed(s.seed, DATA_STREAM, 0);
    let all = match &s.dataset {
        DatasetSpec::Blobs => synth(
            Synth::Blobs {
                mu: s.mu,
                classes: s.classes,
            },
            n,
            s.dim,
            seed,
        )?,
        DatasetSpec::Property => synth(
            Synth::Property {
                mu: s.mu,
                delta: s.delta,
            },
            n,
            s.dim,
            seed,
        )?,
        DatasetSpec::Idx { images, labels } => load_idx(images, labels)
            .with_context(|| format!("loading {} and {}", images.display(), labels.display()))?,
    };
    if all.len() < n {
        bail!(
            "dataset has {} samples but n_train + n_test = {n}",
            all.len()
        );
    }
    let all = if s.model == ModelKind::Cnn {
        as_image(all)?
    } else {
        all
    };
    let train = all.subset(&(0..s.n_train).collect::<Vec<_>>());
    let test = all.subset(&(s.n_train..n).collect::<Vec<_>>());
    Ok((train, test))
}

fn as_image(ds: Dataset) -> anyhow::Result<Dataset> {
    let input = ds.input_shape();
    if input.h > 1 {
        return Ok(ds);
    }
    let side = (input.dim() as f64).sqrt().round() as usize;
    if side * side != input.dim() {
        bail!("the cnn needs square images, got {} features", input.dim());
    }
    Ok(Dataset::new(
        ds.features().clone(),
        InputShape::image(1, side, side),
        ds.labels().to_vec(),
        ds.property().map(<[bool]>::to_vec),
        ds.num_classes(),
    )?)
}

pub fn build_arch(s: &Settings, input: InputShape, classes: usize) -> anyhow::Result<Arch> {
    let arch = match s.model {
        ModelKind::Linear => Arch::mlp(&[input.dim(), classes], s.sketch_last_layer)?,
        ModelKind::Mlp => {
            let mut dims = vec![input.dim()];
            dims.extend(&s.hidden);
            dims.push(classes);
            Arch::mlp(&dims, s.sketch_last_layer)?
        }
        ModelKind::Cnn => Arch::cnn(input, classes, s.sketch_last_layer)?,
    };
    Ok(arch)
}

pub fn train_config(s: &Settings) -> TrainConfig {
    TrainConfig {
        clients: s.m,
        participation: s.c,
        algorithm: s.algorithm,
        local_epochs: s.local_epochs,
        batch_size: s.batch,
        lr: s.lr,
        sketch: SketchPlan {
            kind: s.sketch_kind,
            qs: s.schedule.clone(),
        },
        rounds: s.rounds,
        eval_every: s.eval_every,
        seed: s.seed,
        wall_clock: s.wall_clock,
    }
}

fn setup(s: &Settings) -> anyhow::Result<(TrainConfig, Model, Dataset, Dataset)> {
    let (train, test) = load_data(s)?;
    let arch = build_arch(s, train.input_shape(), train.num_classes())?;
    let cfg = train_config(s);
    cfg.validate()?;
    let model = Model::init(arch, &mut SplitMix64::new(cfg.init_seed()));
    Ok((cfg, model, train, test))
}

pub fn train(s: &Settings) -> anyhow::Result<TrainOutcome> {
    let (cfg, model, train, test) = setup(s)?;
    Ok(run_training(&cfg, model, &train, &test, &mut ())?)
}

/// Trains while a client scores its estimates of every round's update.
pub fn attack_estimate(s: &Settings) -> anyhow::Result<(TrainOutcome, Vec<EstimateRecord>)> {
    let (cfg, model, train, test) = setup(s)?;
    let mut tracker = EstimateTracker::new(s.estimators.clone());
    let outcome = run_training(&cfg, model, &train, &test, &mut tracker)?;
    Ok((outcome, tracker.records))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmRecord {
    pub trial: usize,
    pub mode: &'static str,
    pub q: Option<usize>,
    pub mse: f64,
    pub input_var: f64,
    pub best_loss: f64,
    pub label: usize,
    pub label_true: usize,
}

/// `trials` victims, each attacked once in unsketched training and once in
/// CountSketch training with compression `schedule[0]`.
pub fn attack_gm(s: &Settings) -> anyhow::Result<Vec<GmRecord>> {
    let mut dims = vec![s.dim];
    dims.extend(&s.hidden);
    dims.push(s.classes);
    let runs: Vec<(usize, Option<usize>)> = (0..s.trials)
        .flat_map(|t| [(t, None), (t, Some(s.schedule[0]))])
        .collect();
    runs.par_iter()
        .map(|&(trial, q)| {
            let seed = derive_seed(s.seed, GM_STREAM, trial as u64);
            let scenario = GmScenario {
                dims: dims.clone(),
                q,
                lr: s.lr,
                attacker_batch: s.batch,
                seed,
            };
            let gm = GmConfig {
                iterations: s.gm_iterations,
                restarts: s.gm_restarts,
                lr: s.gm_lr,
                seed,
                ..GmConfig::default()
            };
            let o = gradient_matching_scenario(&scenario, &gm)?;
            Ok(GmRecord {
                trial,
                mode: if q.is_some() {
                    "defended"
                } else {
                    "undefended"
                },
                q,
                mse: o.mse,
                input_var: o.input_var,
                best_loss: o.result.best_loss,
                label: o.result.label,
                label_true: o.label_true,
            })
        })
        .collect()
}

/// The three attack settings on one property dataset of `n_train` samples.
pub fn attack_pia(s: &Settings) -> anyhow::Result<Vec<PiaReport>> {
    let data = synth(
        Synth::Property {
            mu: s.mu,
            delta: s.delta,
        },
        s.n_train,
        s.dim,
        derive_seed(s.seed, DATA_STREAM, 0),
    )?;
    let cfg = PiaConfig {
        rounds: s.rounds,
        batch_size: s.batch,
        lr: s.lr,
        hidden: s.hidden[0],
        q: s.schedule[0],
        seed: s.seed,
        ..PiaConfig::default()
    };
    [
        PiaMode::NoDefense,
        PiaMode::DefendedClient,
        PiaMode::DefendedServer,
    ]
    .par_iter()
    .map(|&mode| Ok(property_inference_attack(&data, mode, &cfg)?))
    .collect()
}

/// Enumeration checks on 20 instances per size, then Monte Carlo with
/// `trials` sketch pairs per configuration.
pub fn verify_theory(s: &Settings) -> anyhow::Result<Vec<Check>> {
    let mut checks = enumeration_checks(s.seed, 20)?;
    checks.extend(monte_carlo_checks(s.seed, s.trials)?);
    Ok(checks)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub op: &'static str,
    pub n: usize,
    pub s: usize,
    pub reps: usize,
    pub median_ms: f64,
}

fn time_median(reps: usize, mut f: impl FnMut() -> anyhow::Result<()>) -> anyhow::Result<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Sketch application against the dense product with the materialized
/// sketch, for an `n × n` matrix and `s = n/2`. Timings vary between runs.
pub fn bench(s: &Settings) -> anyhow::Result<Vec<BenchRecord>> {
    let n = s.bench_n;
    let sk = n / 2;
    let mut rng = SplitMix64::new(s.seed);
    let a = Matrix::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let sketch = generate(&SketchSpec::countsketch(n, sk, derive_seed(s.seed, 0, 0)))?;
    let dense = sketch.materialize();
    let apply = time_median(s.bench_reps, || {
        sketch.apply(&a)?;
        Ok(())
    })?;
    let matmul = time_median(s.bench_reps, || {
        a.matmul(&dense)?;
        Ok(())
    })?;
    let record = |op, median_ms| BenchRecord {
        op,
        n,
        s: sk,
        reps: s.bench_reps,
        median_ms,
    };
    Ok(vec![
        record("sketch_apply", apply),
        record("dense_matmul", matmul),
    ])
}
