//! Acceptance suite. Runs every check, prints one PASS/FAIL line each and
//! exits non-zero if any fails.
//!
//! The accuracy check uses MNIST when `DBCL_MNIST_DIR` holds the training IDX
//! files, and the 10-class blobs substitute otherwise.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use dbcl::data::{synth, Synth};
use dbcl::fedsim::{Client, RoundMsgUp, Server, SketchPlan};
use dbcl::layers::{
    conv_backward, conv_forward, conv_forward_sketched, dense_backward, dense_forward,
    dense_forward_sketched, maxpool2, maxpool2_backward, relu, relu_backward, sigmoid_bce,
    softmax_crossentropy, ConvLayer, DenseLayer, LayerMode,
};
use dbcl::model::{Arch, Model, Net, ParamRef};
use dbcl::sketch::generate;
use dbcl::{Matrix, Shape4, SketchKind, SketchMatrix, SketchSpec, SplitMix64, Tensor4};
use dbcl_cli::commands;
use dbcl_cli::config::{Command as Cmd, DatasetSpec, RunConfig, Settings};
use dbcl_cli::theory::{enumeration_checks, monte_carlo_checks, Check};

type Outcome = anyhow::Result<(bool, String)>;

fn failed_checks(checks: &[Check]) -> String {
    let bad: Vec<String> = checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{} = {:.3e} > {:.1e}", c.name, c.value, c.bound))
        .collect();
    if bad.is_empty() {
        format!("{} checks", checks.len())
    } else {
        bad.join("; ")
    }
}

fn within(elapsed: Duration, limit_s: u64) -> (bool, String) {
    (
        elapsed.as_secs_f64() < limit_s as f64,
        format!("{:.1}s of {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn theory_exact() -> Outcome {
    let t = Instant::now();
    let checks = enumeration_checks(1, 20)?;
    let (fast, time) = within(t.elapsed(), 10);
    Ok((
        fast && checks.iter().all(|c| c.pass),
        format!("{}, {time}", failed_checks(&checks)),
    ))
}

fn theory_monte_carlo() -> Outcome {
    let t = Instant::now();
    let checks = monte_carlo_checks(1, 10_000)?;
    let (fast, time) = within(t.elapsed(), 120);
    Ok((
        fast && checks.iter().all(|c| c.pass),
        format!("{}, {time}", failed_checks(&checks)),
    ))
}

// ---- finite differences ----

const EPS: f64 = 1e-5;

fn randn(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn rand_matrix(r: usize, c: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::new(r, c, randn(r * c, rng)).unwrap()
}

/// Central differences of `f` at `x`.
fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + EPS;
            let up = f(&p);
            p[i] = x[i] - EPS;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

/// `max|a − n| / max(max|a|, max|n|)`.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

fn dense_case(rng: &mut SplitMix64) -> anyhow::Result<f64> {
    let (b, d, s, o) = (4, 7, 3, 5);
    let x = rand_matrix(b, d, rng);
    let c = rand_matrix(b, o, rng);
    let layer = DenseLayer::new(rand_matrix(o, d, rng), randn(o, rng), true)?;
    let sk = generate(&SketchSpec::countsketch(d, s, rng.random()))?;
    let w_sk = sk.apply(&layer.weight)?;

    let (_, cache) = dense_forward(&x, &layer, LayerMode::Train(&sk))?;
    let (grads, gx) = dense_backward(&c, &cache)?;
    let full_w = sk.apply_transpose(&grads.gamma)?;

    let through_w = |w: &[f64]| {
        let l = DenseLayer::new(
            Matrix::new(o, d, w.to_vec()).unwrap(),
            layer.bias.clone(),
            true,
        )
        .unwrap();
        dense_forward(&x, &l, LayerMode::Train(&sk))
            .unwrap()
            .0
            .dot(&c)
            .unwrap()
    };
    let through_wsk = |w: &[f64]| {
        let w = Matrix::new(o, s, w.to_vec()).unwrap();
        dense_forward_sketched(&x, &w, &layer.bias, Some(&sk))
            .unwrap()
            .0
            .dot(&c)
            .unwrap()
    };
    let through_b = |bias: &[f64]| {
        dense_forward_sketched(&x, &w_sk, bias, Some(&sk))
            .unwrap()
            .0
            .dot(&c)
            .unwrap()
    };
    let through_x = |xv: &[f64]| {
        let xm = Matrix::new(b, d, xv.to_vec()).unwrap();
        dense_forward_sketched(&xm, &w_sk, &layer.bias, Some(&sk))
            .unwrap()
            .0
            .dot(&c)
            .unwrap()
    };
    Ok([
        rel_err(full_w.data(), &numeric_grad(layer.weight.data(), through_w)),
        rel_err(grads.gamma.data(), &numeric_grad(w_sk.data(), through_wsk)),
        rel_err(&grads.grad_bias, &numeric_grad(&layer.bias, through_b)),
        rel_err(gx.data(), &numeric_grad(x.data(), through_x)),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

fn conv_case(rng: &mut SplitMix64, padding: usize) -> anyhow::Result<f64> {
    let (c_in, c_out, k) = (2, 3, 3);
    let shape = Shape4::new(2, c_in, 6, 6);
    let x = Tensor4::new(shape, randn(2 * c_in * 36, rng))?;
    let fan_in = c_in * k * k;
    let layer = ConvLayer::new(
        rand_matrix(c_out, fan_in, rng),
        randn(c_out, rng),
        c_in,
        k,
        padding,
        true,
    )?;
    let sk = generate(&SketchSpec::countsketch(fan_in, fan_in / 2, rng.random()))?;
    let w_sk = sk.apply(&layer.weight)?;
    let (out, cache) = conv_forward(&x, &layer, LayerMode::Train(&sk))?;
    let c = Tensor4::new(out.shape(), randn(out.data().len(), rng))?;
    let (grads, gx) = conv_backward(&c, &cache)?;
    let full_w = sk.apply_transpose(&grads.gamma)?;

    let dot = |t: Tensor4| {
        t.data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let sketched = |xt: &Tensor4, w: &Matrix, bias: &[f64]| {
        dot(conv_forward_sketched(xt, w, bias, k, padding, Some(&sk))
            .unwrap()
            .0)
    };
    let through_w = |w: &[f64]| {
        let l = ConvLayer::new(
            Matrix::new(c_out, fan_in, w.to_vec()).unwrap(),
            layer.bias.clone(),
            c_in,
            k,
            padding,
            true,
        )
        .unwrap();
        dot(conv_forward(&x, &l, LayerMode::Train(&sk)).unwrap().0)
    };
    let through_wsk = |w: &[f64]| {
        sketched(
            &x,
            &Matrix::new(c_out, sk.s(), w.to_vec()).unwrap(),
            &layer.bias,
        )
    };
    let through_b = |bias: &[f64]| sketched(&x, &w_sk, bias);
    let through_x = |xv: &[f64]| {
        sketched(
            &Tensor4::new(shape, xv.to_vec()).unwrap(),
            &w_sk,
            &layer.bias,
        )
    };
    Ok([
        rel_err(full_w.data(), &numeric_grad(layer.weight.data(), through_w)),
        rel_err(grads.gamma.data(), &numeric_grad(w_sk.data(), through_wsk)),
        rel_err(&grads.grad_bias, &numeric_grad(&layer.bias, through_b)),
        rel_err(gx.data(), &numeric_grad(x.data(), through_x)),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

fn relu_case(rng: &mut SplitMix64) -> f64 {
    // Keep inputs away from the kink, where the derivative is undefined.
    let z: Vec<f64> = randn(30, rng)
        .into_iter()
        .map(|v| if v.abs() < 0.01 { v + 0.1 } else { v })
        .collect();
    let c = randn(30, rng);
    let f = |zv: &[f64]| relu(zv).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
    rel_err(&relu_backward(&c, &z), &numeric_grad(&z, f))
}

fn maxpool_case(rng: &mut SplitMix64) -> anyhow::Result<f64> {
    let shape = Shape4::new(2, 2, 4, 4);
    // A shuffled grid with spacing 0.1 keeps every window's maximum unique
    // under perturbations of size EPS.
    let mut vals: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), rng);
    let x = Tensor4::new(shape, vals)?;
    let (out, argmax) = maxpool2(&x)?;
    let c = Tensor4::new(out.shape(), randn(out.data().len(), rng))?;
    let gx = maxpool2_backward(&c, &argmax, shape)?;
    let f = |xv: &[f64]| {
        let (o, _) = maxpool2(&Tensor4::new(shape, xv.to_vec()).unwrap()).unwrap();
        o.data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    Ok(rel_err(gx.data(), &numeric_grad(x.data(), f)))
}

fn softmax_case(rng: &mut SplitMix64) -> anyhow::Result<f64> {
    let logits = rand_matrix(4, 5, rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    let (_, g) = softmax_crossentropy(&logits, &labels)?;
    let f = |l: &[f64]| {
        softmax_crossentropy(&Matrix::new(4, 5, l.to_vec()).unwrap(), &labels)
            .unwrap()
            .0
    };
    Ok(rel_err(g.data(), &numeric_grad(logits.data(), f)))
}

fn sigmoid_case(rng: &mut SplitMix64) -> anyhow::Result<f64> {
    let logits = rand_matrix(6, 1, rng);
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..2)).collect();
    let (_, g) = sigmoid_bce(&logits, &labels)?;
    let f = |l: &[f64]| {
        sigmoid_bce(&Matrix::new(6, 1, l.to_vec()).unwrap(), &labels)
            .unwrap()
            .0
    };
    Ok(rel_err(g.data(), &numeric_grad(logits.data(), f)))
}

fn gradient_correctness() -> Outcome {
    let mut rng = SplitMix64::new(3);
    let mut worst: Vec<(&str, f64)> = vec![
        ("dense", 0.0),
        ("conv", 0.0),
        ("relu", 0.0),
        ("maxpool", 0.0),
        ("softmax_ce", 0.0),
        ("sigmoid_bce", 0.0),
    ];
    for i in 0..10 {
        let errs = [
            dense_case(&mut rng)?,
            conv_case(&mut rng, i % 2)?,
            relu_case(&mut rng),
            maxpool_case(&mut rng)?,
            softmax_case(&mut rng)?,
            sigmoid_case(&mut rng)?,
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            w.1 = w.1.max(e);
        }
    }
    let pass = worst.iter().all(|(_, e)| *e <= 1e-4);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, format!("max relative error: {detail}")))
}

// ---- protocol identity ----

fn protocol_identity() -> Outcome {
    let arch = Arch::mlp(&[20, 16, 12, 4], true)?;
    let model = Model::init(arch.clone(), &mut SplitMix64::new(40));
    let lr = 0.1;
    let mut server = Server::new(
        model.clone(),
        SketchPlan::constant(SketchKind::CountSketch, 2),
        lr,
        41,
    )?;
    let data = synth(
        Synth::Blobs {
            mu: 3.0,
            classes: 4,
        },
        30,
        20,
        42,
    )?;
    let mut clients: Vec<Client> = (0..3)
        .map(|i| {
            Client::new(
                i,
                data.subset(&(10 * i..10 * i + 10).collect::<Vec<_>>()),
                i as u64,
            )
        })
        .collect();
    let msg = server.broadcast_round()?;
    let ups: Vec<RoundMsgUp> = clients
        .iter_mut()
        .map(|c| c.round_dsgd(&arch, &msg, 10))
        .collect::<dbcl::Result<_>>()?;
    server.aggregate_and_update(&ups)?;

    // Equal full-shard batches: the mean of the client losses is the loss
    // on all 30 samples.
    let sketches = msg.sketches(&arch)?;
    let sk_w = model.sketched_weights(&sketches)?;
    let params = sk_w
        .iter()
        .zip(model.params())
        .zip(&sketches)
        .map(|((w, p), s)| ParamRef {
            weight: w,
            bias: &p.bias,
            sketch: s.as_ref(),
        })
        .collect();
    let (_, grads) = Net::new(&arch, params)?.loss_and_grads(data.features(), data.labels())?;
    let mut worst = 0.0f64;
    let mut ratios_exact = true;
    for (l, g) in grads.iter().enumerate() {
        let s: &SketchMatrix = sketches[l].as_ref().expect("every layer sketched");
        let mono = s.apply_transpose(&g.gamma)?;
        let step = model.params()[l]
            .weight
            .sub(&server.model().params()[l].weight)?
            .scale(1.0 / lr);
        worst = worst.max(step.max_abs_diff(&mono));
        let d_in = model.params()[l].weight.cols();
        let dense_bytes = model.params()[l].weight.rows() * d_in * 8;
        let ratio = msg.layers[l].weight_payload_bytes() as f64 / dense_bytes as f64;
        ratios_exact &= ratio == s.s() as f64 / d_in as f64;
    }
    Ok((
        worst <= 1e-12 && ratios_exact,
        format!(
            "max |ΓSᵀ step − monolithic| = {worst:.1e}, bytes ratio s/d_in exact: {ratios_exact}"
        ),
    ))
}

// ---- training with and without sketching ----

fn train_settings(sketched: bool) -> anyhow::Result<Settings> {
    let mut cfg = RunConfig::default();
    cfg.set("rounds", "40")?;
    cfg.set("sketch_kind", if sketched { "countsketch" } else { "none" })?;
    cfg.set("estimators", "option1")?;
    let mut s = cfg.settings(Cmd::Train)?;
    if let Ok(dir) = std::env::var("DBCL_MNIST_DIR") {
        s.dataset = DatasetSpec::Idx {
            images: format!("{dir}/train-images-idx3-ubyte").into(),
            labels: format!("{dir}/train-labels-idx1-ubyte").into(),
        };
    }
    Ok(s)
}

fn eval_curve(history: &[dbcl::fedsim::MetricsRecord]) -> Vec<(u64, f64)> {
    history
        .iter()
        .filter(|r| r.phase == "eval")
        .map(|r| (r.round, r.accuracy.unwrap_or(0.0)))
        .collect()
}

fn first_reaching(curve: &[(u64, f64)], target: f64) -> Option<u64> {
    curve.iter().find(|(_, a)| *a >= target).map(|(r, _)| *r)
}

fn accuracy_and_estimators() -> anyhow::Result<(Outcome, Outcome)> {
    let t = Instant::now();
    let plain = commands::train(&train_settings(false)?)?;
    let (sketched, records) = commands::attack_estimate(&train_settings(true)?)?;
    let (fast, time) = within(t.elapsed(), 900);

    let (pc, sc) = (eval_curve(&plain.history), eval_curve(&sketched.history));
    let (p_final, s_final) = (pc.last().unwrap().1, sc.last().unwrap().1);
    let target = p_final - 0.01;
    let (p_r, s_r) = (first_reaching(&pc, target), first_reaching(&sc, target));
    let ratio = match (p_r, s_r) {
        (Some(p), Some(s)) => Some(s as f64 / p as f64),
        _ => None,
    };
    let c5 = (
        fast && (s_final - p_final).abs() <= 0.01 && ratio.is_some_and(|r| r <= 6.0),
        format!(
            "accuracy unsketched {p_final:.4}, sketched {s_final:.4}; rounds to {target:.4}: {p_r:?} vs {s_r:?}; {time}"
        ),
    );

    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let rounds = records.iter().map(|r| r.round).max().unwrap_or(0);
    let per_round = |round: u64| {
        median(
            records
                .iter()
                .filter(|r| r.round == round)
                .map(|r| r.l2_rel)
                .collect(),
        )
    };
    let first = per_round(1);
    let quarter_start = 40 - 40 / 4 + 1;
    let late: Vec<f64> = (quarter_start..=rounds).map(per_round).collect();
    let max_cos = records
        .iter()
        .filter(|r| r.round >= 2)
        .map(|r| r.cosine)
        .fold(f64::MIN, f64::max);
    let c6 = (
        !late.is_empty() && late.iter().all(|&v| v > first) && max_cos < 0.5,
        format!(
            "median l2_rel round 1 {first:.2}, final quarter min {:.2}; max cosine after round 1 {max_cos:.3}",
            late.iter().copied().fold(f64::INFINITY, f64::min)
        ),
    );
    Ok((Ok(c5), Ok(c6)))
}

fn gradient_matching_defense() -> Outcome {
    let s = RunConfig::default().settings(Cmd::AttackGm)?;
    let records = commands::attack_gm(&s)?;
    let undef: Vec<f64> = records
        .iter()
        .filter(|r| r.mode == "undefended")
        .map(|r| r.mse)
        .collect();
    let def: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.mode == "defended")
        .map(|r| (r.mse, r.input_var))
        .collect();
    let pass = undef.len() == 5
        && def.len() == 5
        && undef.iter().all(|&m| m <= 1e-2)
        && def.iter().all(|&(m, v)| m >= 0.5 * v);
    Ok((
        pass,
        format!(
            "undefended max MSE {:.1e}, defended min MSE {:.2} (input variance 1)",
            undef.iter().copied().fold(0.0, f64::max),
            def.iter().map(|d| d.0).fold(f64::INFINITY, f64::min)
        ),
    ))
}

fn property_inference_defense() -> Outcome {
    let t = Instant::now();
    let s = RunConfig::default().settings(Cmd::AttackPia)?;
    let reports = commands::attack_pia(&s)?;
    let (fast, time) = within(t.elapsed(), 300);
    let auc = |name: &str| {
        reports
            .iter()
            .find(|r| r.mode.name() == name)
            .map(|r| r.auc)
            .unwrap_or(f64::NAN)
    };
    let (none, client, server) = (
        auc("no_defense"),
        auc("defended_client"),
        auc("defended_server"),
    );
    Ok((
        fast && none >= 0.9 && client <= 0.6 && client < server && server < none,
        format!("AUC undefended {none:.3}, defended client {client:.3}, defended server {server:.3}; {time}"),
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    let runs: &[&[&str]] = &[
        &[
            "train",
            "--set",
            "n_train=400",
            "--set",
            "n_test=100",
            "--set",
            "dim=16",
            "--set",
            "hidden=12",
            "--set",
            "rounds=3",
            "--set",
            "m=4",
            "--set",
            "c=0.5",
        ],
        &[
            "attack-estimate",
            "--set",
            "n_train=400",
            "--set",
            "n_test=100",
            "--set",
            "dim=16",
            "--set",
            "hidden=12,8",
            "--set",
            "rounds=4",
            "--set",
            "m=4",
        ],
        &[
            "attack-gm",
            "--set",
            "trials=2",
            "--set",
            "gm_iterations=200",
        ],
        &["attack-pia", "--set", "rounds=60", "--set", "n_train=800"],
        &["verify-theory", "--set", "trials=500"],
    ];
    let mut identical = 0;
    for (i, args) in runs.iter().enumerate() {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = dir.path().join(format!("{i}_{rep}.jsonl"));
            let o = Command::new(env!("CARGO_BIN_EXE_dbcl"))
                .args(*args)
                .args(["--seed", "11", "--set", &format!("out={}", out.display())])
                .output()?;
            anyhow::ensure!(
                o.status.success(),
                "{} failed: {}",
                args[0],
                String::from_utf8_lossy(&o.stderr)
            );
            outputs.push((o.stdout, std::fs::read(&out)?));
        }
        if outputs[0] == outputs[1] && !outputs[0].1.is_empty() {
            identical += 1;
        }
    }
    Ok((
        identical == runs.len(),
        format!(
            "{identical}/{} subcommands byte-identical across two runs",
            runs.len()
        ),
    ))
}

fn report(n: u32, name: &str, outcome: Outcome) -> bool {
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    println!(
        "acceptance {n} ({name}): {}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report(1, "theory, exact enumeration", theory_exact());
    all &= report(2, "theory, Monte Carlo", theory_monte_carlo());
    all &= report(3, "gradient correctness", gradient_correctness());
    all &= report(4, "protocol identity", protocol_identity());
    let (c5, c6) = accuracy_and_estimators().unwrap_or_else(|e| {
        let msg = format!("{e:#}");
        (Err(anyhow::anyhow!(msg.clone())), Err(anyhow::anyhow!(msg)))
    });
    all &= report(5, "no accuracy loss", c5);
    all &= report(6, "estimator degradation", c6);
    all &= report(7, "gradient-matching defense", gradient_matching_defense());
    all &= report(
        8,
        "property inference defense",
        property_inference_defense(),
    );
    all &= report(9, "determinism", determinism());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
