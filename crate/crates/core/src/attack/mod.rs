//! Attacks on collaborative training and the estimators they rely on.
//!
//! A malicious client sees two consecutive broadcasts `W̃_old = W_old S_old`
//! and `W̃_new = W_new S_new` together with the seeds, so it can rebuild both
//! sketches and form
//!
//! * option I: `Δ̂ = W̃_old S_oldᵀ − W̃_new S_newᵀ`,
//! * option II: the same with `Sᵀ` replaced by the pseudo-inverse `S†`.
//!
//! Without sketching the difference `W_old − W_new` is exact and, knowing
//! its own contribution, the attacker recovers the sum of its peers'
//! updates ([`infer_peer_sum`]).

mod gm;
mod pia;

pub use gm::{
    gradient_matching_attack, gradient_matching_scenario, infer_label, GmConfig, GmOutcome,
    GmResult, GmScenario,
};
pub use pia::{
    auc, logistic_fit, property_inference_attack, LogisticModel, PiaConfig, PiaMode, PiaReport,
};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::fedsim::{RoundMsgDown, RoundObserver};
use crate::linalg::Matrix;
use crate::model::{Arch, Model};
use crate::rng::derive_seed;
use crate::sketch::{generate, product_error_expectation, SketchMatrix, SketchSpec};

/// `Σ_{i≠k} Δᵢ = m (W_old − W_new) − Δ_k` for the unsketched protocol.
pub fn infer_peer_sum(
    m: usize,
    w_old: &Matrix,
    w_new: &Matrix,
    delta_k: &Matrix,
) -> Result<Matrix> {
    let mut out = w_old.sub(w_new)?.scale(m as f64);
    out.axpy(-1.0, delta_k)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Option1,
    Option2,
    /// `W̃_old − W̃_new` taken at face value, zero-padded to `d_in` columns.
    /// Deliberately wrong; shows why the sketches must be undone.
    NaiveDifference,
    /// `Γᵢ Sᵀ`, available to the server.
    ServerSide,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Option1 => "option1",
            Estimator::Option2 => "option2",
            Estimator::NaiveDifference => "naive",
            Estimator::ServerSide => "server_side",
        }
    }
}

/// What a client observes about one layer across two rounds. A `None`
/// sketch marks a layer that was sent in full.
#[derive(Debug, Clone)]
pub struct AttackView {
    pub w_old: Matrix,
    pub w_new: Matrix,
    pub s_old: Option<SketchMatrix>,
    pub s_new: Option<SketchMatrix>,
    /// The attacker's own update in full coordinates, if it took part.
    pub own_delta: Option<Matrix>,
    pub m: usize,
}

impl AttackView {
    /// Builds the view of parameter layer `layer` from two consecutive
    /// broadcasts, regenerating the sketches from their seeds.
    pub fn from_broadcasts(
        arch: &Arch,
        old: &RoundMsgDown,
        new: &RoundMsgDown,
        layer: usize,
        m: usize,
    ) -> Result<Self> {
        if new.round != old.round + 1 {
            return Err(Error::Protocol(format!(
                "broadcasts of rounds {} and {} are not consecutive",
                old.round, new.round
            )));
        }
        let mut s_old = old.sketches(arch)?;
        let mut s_new = new.sketches(arch)?;
        let get = |msg: &RoundMsgDown| {
            msg.layers
                .get(layer)
                .map(|l| l.weight.clone())
                .ok_or_else(|| Error::Protocol(format!("no layer {layer}")))
        };
        Ok(Self {
            w_old: get(old)?,
            w_new: get(new)?,
            s_old: s_old[layer].take(),
            s_new: s_new[layer].take(),
            own_delta: None,
            m,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub delta_hat: Matrix,
    pub method: Estimator,
}

fn back_project(w: &Matrix, s: Option<&SketchMatrix>, pinv: bool) -> Result<Matrix> {
    match s {
        None => Ok(w.clone()),
        Some(s) if pinv => s.apply_pinv(w),
        Some(s) => s.apply_transpose(w),
    }
}

/// Estimates `Δ = W_old − W_new` from the view.
pub fn estimate_delta(view: &AttackView, method: Estimator) -> Result<GradEstimate> {
    let delta_hat = match method {
        Estimator::Option1 | Estimator::Option2 => {
            let pinv = method == Estimator::Option2;
            let old = back_project(&view.w_old, view.s_old.as_ref(), pinv)?;
            let new = back_project(&view.w_new, view.s_new.as_ref(), pinv)?;
            old.sub(&new).map_err(|_| {
                Error::Protocol("sketch descriptors disagree on the layer input size".into())
            })?
        }
        Estimator::NaiveDifference => {
            let diff = view.w_old.sub(&view.w_new)?;
            let d_in = view
                .s_old
                .as_ref()
                .or(view.s_new.as_ref())
                .map_or(diff.cols(), |s| s.d());
            Matrix::from_fn(diff.rows(), d_in, |i, j| {
                if j < diff.cols() {
                    diff.get(i, j)
                } else {
                    0.0
                }
            })
        }
        Estimator::ServerSide => {
            return Err(Error::Protocol(
                "the server-side estimate needs Γ, see server_side_estimate".into(),
            ))
        }
    };
    Ok(GradEstimate { delta_hat, method })
}

/// Estimate of the peers' summed update: `m Δ̂ − Δ_k`.
pub fn estimate_peer_sum(view: &AttackView, method: Estimator) -> Result<Matrix> {
    let est = estimate_delta(view, method)?;
    let mut out = est.delta_hat.scale(view.m as f64);
    if let Some(own) = &view.own_delta {
        out.axpy(-1.0, own)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttackMetrics {
    /// `‖Δ̂ − Δ‖ / ‖Δ‖`.
    pub l2_rel: f64,
    /// `⟨Δ̂, Δ⟩ / (‖Δ̂‖ ‖Δ‖)`.
    pub cosine: f64,
}

pub fn attack_metrics(delta_hat: &Matrix, delta: &Matrix) -> Result<AttackMetrics> {
    let nd = delta.frobenius_sq();
    let nh = delta_hat.frobenius_sq();
    if nd == 0.0 {
        return Err(Error::UndefinedMetric("relative error with Δ = 0"));
    }
    if nh == 0.0 {
        return Err(Error::UndefinedMetric("cosine with Δ̂ = 0"));
    }
    let l2_rel = delta_hat.sub(delta)?.frobenius() / nd.sqrt();
    // sqrt of the product is exact for Δ̂ = Δ, the product of square roots is not.
    let cosine = (delta_hat.dot(delta)? / (nh * nd).sqrt()).clamp(-1.0, 1.0);
    Ok(AttackMetrics { l2_rel, cosine })
}

/// Splits option I into `(Δ S_old S_oldᵀ, W_new (S_old S_oldᵀ − S_new S_newᵀ))`.
pub fn noise_decomposition(
    w_old: &Matrix,
    w_new: &Matrix,
    s_old: &SketchMatrix,
    s_new: &SketchMatrix,
) -> Result<(Matrix, Matrix)> {
    let project = |a: &Matrix, s: &SketchMatrix| s.apply_transpose(&s.apply(a)?);
    let delta = w_old.sub(w_new)?;
    let signal = project(&delta, s_old)?;
    let noise = project(w_new, s_old)?.sub(&project(w_new, s_new)?)?;
    Ok((signal, noise))
}

/// Exact `E‖Δ̂ Vᵀ − Δ Vᵀ‖²_F` for option I over two independent
/// CountSketches of size `s`.
pub fn expected_error_exact(w_old: &Matrix, w_new: &Matrix, v: &Matrix, s: usize) -> Result<f64> {
    if w_old.shape() != w_new.shape() || v.cols() != w_old.cols() {
        return Err(dim_err(
            "expected_error_exact",
            format!(
                "W_old {:?}, W_new {:?}, V {:?}",
                w_old.shape(),
                w_new.shape(),
                v.shape()
            ),
        ));
    }
    Ok(product_error_expectation(w_old, v, s)? + product_error_expectation(w_new, v, s)?)
}

/// The `V = I` case: `((d_in − 1)/s)(‖W_old‖² + ‖W_new‖²)`.
pub fn expected_error_identity(w_old: &Matrix, w_new: &Matrix, s: usize) -> Result<f64> {
    if w_old.shape() != w_new.shape() || s == 0 {
        return Err(dim_err(
            "expected_error_identity",
            "shape mismatch or s = 0",
        ));
    }
    let d = w_old.cols() as f64;
    Ok((d - 1.0) / s as f64 * (w_old.frobenius_sq() + w_new.frobenius_sq()))
}

/// `‖Δ̂ Vᵀ − Δ Vᵀ‖²_F` for one pair of sketches; `v = None` means `V = I`.
pub fn squared_error(
    w_old: &Matrix,
    w_new: &Matrix,
    v: Option<&Matrix>,
    s_old: &SketchMatrix,
    s_new: &SketchMatrix,
) -> Result<f64> {
    let view = AttackView {
        w_old: s_old.apply(w_old)?,
        w_new: s_new.apply(w_new)?,
        s_old: Some(s_old.clone()),
        s_new: Some(s_new.clone()),
        own_delta: None,
        m: 1,
    };
    let err = estimate_delta(&view, Estimator::Option1)?
        .delta_hat
        .sub(&w_old.sub(w_new)?)?;
    Ok(match v {
        Some(v) => err.matmul_t(v)?.frobenius_sq(),
        None => err.frobenius_sq(),
    })
}

/// Mean and standard error of [`squared_error`] over `trials` independent
/// CountSketch pairs. Trial `i` uses seeds `derive_seed(seed, i, 0|1)`.
pub fn monte_carlo_error(
    w_old: &Matrix,
    w_new: &Matrix,
    v: Option<&Matrix>,
    s: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if trials < 2 {
        return Err(Error::Config("Monte Carlo needs at least 2 trials".into()));
    }
    let d = w_old.cols();
    let samples: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let s_old = generate(&SketchSpec::countsketch(d, s, derive_seed(seed, i, 0)))?;
            let s_new = generate(&SketchSpec::countsketch(d, s, derive_seed(seed, i, 1)))?;
            squared_error(w_old, w_new, v, &s_old, &s_new)
        })
        .collect::<Result<_>>()?;
    let n = trials as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// `Γᵢ Sᵀ`: the server's estimate of client `i`'s gradient.
pub fn server_side_estimate(gamma: &Matrix, s: &SketchMatrix) -> Result<GradEstimate> {
    Ok(GradEstimate {
        delta_hat: s.apply_transpose(gamma)?,
        method: Estimator::ServerSide,
    })
}

/// One line of an attack report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRecord {
    /// Round whose update `W_old − W_new` was estimated (1-based).
    pub round: u64,
    pub layer: usize,
    pub method: &'static str,
    pub l2_rel: f64,
    pub cosine: f64,
}

/// Observes a training run and scores an eavesdropping client's estimate of
/// every round's update of each sketch-enabled layer against the truth.
pub struct EstimateTracker {
    methods: Vec<Estimator>,
    prev: Option<(RoundMsgDown, Model)>,
    pub records: Vec<EstimateRecord>,
}

impl EstimateTracker {
    pub fn new(methods: Vec<Estimator>) -> Self {
        Self {
            methods,
            prev: None,
            records: Vec::new(),
        }
    }
}

impl RoundObserver for EstimateTracker {
    fn on_broadcast(&mut self, msg: &RoundMsgDown, model: &Model) -> Result<()> {
        if let Some((old, old_model)) = self.prev.take() {
            let arch = model.arch();
            let enabled: Vec<bool> = arch.param_ops().map(|op| op.sketch_enabled()).collect();
            for (l, _) in enabled.iter().enumerate().filter(|(_, e)| **e) {
                let delta = old_model.params()[l]
                    .weight
                    .sub(&model.params()[l].weight)?;
                let view = AttackView::from_broadcasts(arch, &old, msg, l, 1)?;
                for &method in &self.methods {
                    let est = estimate_delta(&view, method)?;
                    let m = attack_metrics(&est.delta_hat, &delta)?;
                    self.records.push(EstimateRecord {
                        round: old.round + 1,
                        layer: l,
                        method: method.name(),
                        l2_rel: m.l2_rel,
                        cosine: m.cosine,
                    });
                }
            }
        }
        self.prev = Some((msg.clone(), model.clone()));
        Ok(())
    }
}
