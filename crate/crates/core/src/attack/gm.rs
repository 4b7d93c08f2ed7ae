//! Gradient-matching reconstruction of a single training example.
//!
//! The attacker optimizes a dummy input `x̂` so that the gradient it induces
//! on the attacker's copy of the model matches an observed gradient. The
//! outer gradient is taken by central finite differences, which keeps the
//! layers first-order only; inputs are small enough for this to be cheap.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fedsim::{LayerUp, RoundMsgDown, RoundMsgUp, Server, SketchPlan, UpKind};
use crate::layers::ParamGrads;
use crate::linalg::Matrix;
use crate::model::{Arch, LossKind, Model, Net, Param, ParamRef};
use crate::rng::{derive_seed, SplitMix64};
use crate::sketch::{SketchKind, SketchMatrix};

use super::{estimate_peer_sum, AttackView, Estimator};

#[derive(Debug, Clone, PartialEq)]
pub struct GmConfig {
    pub iterations: usize,
    pub restarts: usize,
    /// Initial Adam step size, annealed to 1% by a cosine schedule.
    pub lr: f64,
    pub fd_eps: f64,
    /// Known label; `None` infers it from the output-layer bias gradient.
    pub label: Option<usize>,
    /// Starting point of the first restart; later restarts draw `N(0, I)`.
    pub init: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for GmConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            restarts: 3,
            lr: 0.1,
            fd_eps: 1e-4,
            label: None,
            init: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmResult {
    pub x_hat: Vec<f64>,
    pub label: usize,
    /// Matching loss per iteration of the restart that produced `x_hat`.
    pub loss_trace: Vec<f64>,
    pub best_loss: f64,
}

/// The label whose output-bias gradient entry is negative: for softmax the
/// gradient is `p − onehot(y)`, for the sigmoid loss it is `σ(z) − y`.
pub fn infer_label(kind: LossKind, output_bias_grad: &[f64]) -> usize {
    match kind {
        LossKind::SigmoidBce => usize::from(output_bias_grad.first().is_some_and(|&g| g < 0.0)),
        LossKind::SoftmaxCrossEntropy => {
            let mut best = 0;
            for (i, g) in output_bias_grad.iter().enumerate() {
                if *g < output_bias_grad[best] {
                    best = i;
                }
            }
            best
        }
    }
}

/// `Σ_ℓ ‖∇W_ℓ − obs_ℓ‖² + ‖∇b_ℓ − obs_b_ℓ‖²`, divided by `Σ_ℓ ‖obs_ℓ‖²`.
fn matching_loss(
    model: &Model,
    observed: &[ParamGrads],
    x: &Matrix,
    label: usize,
    norm: f64,
) -> Result<f64> {
    let (_, grads) = model.net().loss_and_grads(x, &[label])?;
    let mut total = 0.0;
    for (g, o) in grads.iter().zip(observed) {
        total += g.gamma.sub(&o.gamma)?.frobenius_sq();
        total += g
            .grad_bias
            .iter()
            .zip(&o.grad_bias)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / norm)
}

/// Reconstructs one input of `model` from `observed`, its full per-layer
/// weight and bias gradients for a batch of one.
pub fn gradient_matching_attack(
    model: &Model,
    observed: &[ParamGrads],
    cfg: &GmConfig,
) -> Result<GmResult> {
    let shapes: Vec<_> = model.params().iter().map(|p| p.weight.shape()).collect();
    if observed.len() != shapes.len()
        || observed
            .iter()
            .zip(&shapes)
            .any(|(o, s)| o.gamma.shape() != *s || o.grad_bias.len() != s.0)
    {
        return Err(Error::Protocol(
            "observed gradients do not match the model layers".into(),
        ));
    }
    let arch = model.arch();
    let label = match cfg.label {
        Some(l) => l,
        None => infer_label(
            arch.loss(),
            &observed.last().expect("at least one layer").grad_bias,
        ),
    };
    let dim = arch.input().dim();
    let norm = observed
        .iter()
        .map(|o| o.gamma.frobenius_sq() + o.grad_bias.iter().map(|b| b * b).sum::<f64>())
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);

    let mut best: Option<GmResult> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, r as u64, 0));
        let mut x = match (&cfg.init, r) {
            (Some(init), 0) => Matrix::new(1, dim, init.clone())?,
            _ => Matrix::from_fn(1, dim, |_, _| rng.sample(StandardNormal)),
        };
        let (mut m1, mut m2) = (vec![0.0; dim], vec![0.0; dim]);
        let (b1, b2) = (0.9, 0.999);
        let mut trace = Vec::with_capacity(cfg.iterations + 1);
        let mut run_best = (f64::INFINITY, x.clone());
        for it in 0..=cfg.iterations {
            let loss = matching_loss(model, observed, &x, label, norm)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: it });
            }
            trace.push(loss);
            if loss < run_best.0 {
                run_best = (loss, x.clone());
            }
            if it == cfg.iterations || loss < 1e-20 {
                break;
            }
            let mut grad = vec![0.0; dim];
            for (j, g) in grad.iter_mut().enumerate() {
                let x0 = x.get(0, j);
                x.set(0, j, x0 + cfg.fd_eps);
                let up = matching_loss(model, observed, &x, label, norm)?;
                x.set(0, j, x0 - cfg.fd_eps);
                let down = matching_loss(model, observed, &x, label, norm)?;
                x.set(0, j, x0);
                *g = (up - down) / (2.0 * cfg.fd_eps);
            }
            let progress = it as f64 / cfg.iterations.max(1) as f64;
            let lr = cfg.lr * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            let t = (it + 1) as i32;
            for j in 0..dim {
                m1[j] = b1 * m1[j] + (1.0 - b1) * grad[j];
                m2[j] = b2 * m2[j] + (1.0 - b2) * grad[j] * grad[j];
                let mh = m1[j] / (1.0 - b1.powi(t));
                let vh = m2[j] / (1.0 - b2.powi(t));
                let v = x.get(0, j) - lr * mh / (vh.sqrt() + 1e-12);
                x.set(0, j, v);
            }
        }
        if best.as_ref().is_none_or(|b| run_best.0 < b.best_loss) {
            best = Some(GmResult {
                x_hat: run_best.1.into_data(),
                label,
                loss_trace: trace,
                best_loss: run_best.0,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// A two-client round in which a malicious client reconstructs the other
/// client's single training example.
#[derive(Debug, Clone, PartialEq)]
pub struct GmScenario {
    /// MLP layer sizes, input first.
    pub dims: Vec<usize>,
    /// Compression of the sketched layers; `None` trains unsketched.
    pub q: Option<usize>,
    pub lr: f64,
    /// Batch size of the attacker's own contribution.
    pub attacker_batch: usize,
    pub seed: u64,
}

impl Default for GmScenario {
    fn default() -> Self {
        Self {
            dims: vec![16, 8, 4],
            q: None,
            lr: 0.01,
            attacker_batch: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmOutcome {
    pub x_true: Vec<f64>,
    pub label_true: usize,
    pub result: GmResult,
    /// Mean squared error of the reconstruction.
    pub mse: f64,
    /// Per-coordinate variance of the distribution the input was drawn from.
    pub input_var: f64,
}

fn client_grads(
    arch: &Arch,
    msg: &RoundMsgDown,
    sketches: &[Option<SketchMatrix>],
    x: &Matrix,
    y: &[usize],
) -> Result<(f64, Vec<ParamGrads>)> {
    let params = msg
        .layers
        .iter()
        .zip(sketches)
        .map(|(l, s)| ParamRef {
            weight: &l.weight,
            bias: &l.bias,
            sketch: s.as_ref(),
        })
        .collect();
    Net::new(arch, params)?.loss_and_grads(x, y)
}

fn back_project(w: &Matrix, s: &Option<SketchMatrix>) -> Result<Matrix> {
    match s {
        Some(s) => s.apply_transpose(w),
        None => Ok(w.clone()),
    }
}

/// Plays one protocol round between a victim holding a single `N(0, I)`
/// example and the attacker, then attacks with what the attacker saw.
///
/// The attacker's model is its best guess of the round's weights
/// (`W̃ Sᵀ` for sketched layers) and the target gradient is its peer-sum
/// estimate divided by the learning rate.
pub fn gradient_matching_scenario(sc: &GmScenario, gm: &GmConfig) -> Result<GmOutcome> {
    let arch = Arch::mlp(&sc.dims, false)?;
    let classes = arch.num_classes();
    let mut rng = SplitMix64::new(derive_seed(sc.seed, 0, 0));
    let model = Model::init(arch.clone(), &mut rng);
    let plan = match sc.q {
        Some(q) => SketchPlan::constant(SketchKind::CountSketch, q),
        None => SketchPlan::off(),
    };
    let mut server = Server::new(model, plan, sc.lr, derive_seed(sc.seed, 0, 1))?;
    let dim = sc.dims[0];

    let x_true: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let label_true = rng.random_range(0..classes);
    let ax = Matrix::from_fn(sc.attacker_batch, dim, |_, _| rng.sample(StandardNormal));
    let ay: Vec<usize> = (0..sc.attacker_batch)
        .map(|_| rng.random_range(0..classes))
        .collect();

    let old = server.broadcast_round()?;
    let sk_old = old.sketches(&arch)?;
    let (lv, gv) = client_grads(
        &arch,
        &old,
        &sk_old,
        &Matrix::row_vector(&x_true),
        &[label_true],
    )?;
    let (la, ga) = client_grads(&arch, &old, &sk_old, &ax, &ay)?;
    let up = |client_id: usize, loss: f64, samples: usize, g: &[ParamGrads]| RoundMsgUp {
        client_id,
        round: old.round,
        kind: UpKind::Gamma,
        layers: g
            .iter()
            .map(|p| LayerUp {
                weight: p.gamma.clone(),
                bias: p.grad_bias.clone(),
            })
            .collect(),
        loss,
        samples,
    };
    server.aggregate_and_update(&[up(0, lv, 1, &gv), up(1, la, sc.attacker_batch, &ga)])?;
    let new = server.broadcast_round()?;

    let m = 2usize;
    let mut observed = Vec::with_capacity(ga.len());
    let mut snapshot = Vec::with_capacity(ga.len());
    for (l, own) in ga.iter().enumerate() {
        let mut view = AttackView::from_broadcasts(&arch, &old, &new, l, m)?;
        view.own_delta = Some(back_project(&own.gamma, &sk_old[l])?.scale(sc.lr));
        let gamma = estimate_peer_sum(&view, Estimator::Option1)?.scale(1.0 / sc.lr);
        let (b_old, b_new) = (&old.layers[l].bias, &new.layers[l].bias);
        let grad_bias = (0..b_old.len())
            .map(|i| (m as f64 * (b_old[i] - b_new[i]) - sc.lr * own.grad_bias[i]) / sc.lr)
            .collect();
        observed.push(ParamGrads { gamma, grad_bias });
        snapshot.push(Param {
            weight: back_project(&old.layers[l].weight, &sk_old[l])?,
            bias: b_old.clone(),
        });
    }
    let attacker_model = Model::new(arch, snapshot)?;
    let result = gradient_matching_attack(&attacker_model, &observed, gm)?;
    let mse = result
        .x_hat
        .iter()
        .zip(&x_true)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / dim as f64;
    Ok(GmOutcome {
        x_true,
        label_true,
        result,
        mse,
        input_var: 1.0,
    })
}
