//! Numerical checks of the option-I estimator's bias and error.
//!
//! The enumeration checks average over every pair of CountSketches of tiny
//! layers, so they test the expectations exactly. The Monte Carlo checks
//! compare sample means on realistic sizes with the closed form for `V = I`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use dbcl::attack::{
    estimate_delta, expected_error_exact, expected_error_identity, monte_carlo_error,
    squared_error, AttackView, Estimator,
};
use dbcl::sketch::all_countsketches;
use dbcl::{derive_seed, Matrix, Result, SplitMix64};

/// One row of the verification table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// The measured deviation.
    pub value: f64,
    /// The check passes when `value <= bound`.
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: String, value: f64, bound: f64) -> Self {
        Check {
            pass: value <= bound,
            name,
            value,
            bound,
        }
    }
}

pub const ENUM_SIZES: [(usize, usize); 3] = [(2, 1), (3, 1), (3, 2)];

fn int_matrix(r: usize, c: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-4i32..=4) as f64)
}

/// For each `(d, s)` in [`ENUM_SIZES`] and `instances` random integer
/// `W_old, W_new, V`: the largest deviation of the mean of `Δ̂` from `Δ`,
/// and of the mean squared error from [`expected_error_exact`].
pub fn enumeration_checks(seed: u64, instances: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (i, &(d, s)) in ENUM_SIZES.iter().enumerate() {
        let mut rng = SplitMix64::new(derive_seed(seed, i as u64, 0));
        let sketches: Vec<_> = all_countsketches(d, s).collect();
        let pairs = (sketches.len() * sketches.len()) as f64;
        let (mut bias_dev, mut err_dev) = (0.0f64, 0.0f64);
        for _ in 0..instances {
            let w_old = int_matrix(2, d, &mut rng);
            let w_new = int_matrix(2, d, &mut rng);
            let v = int_matrix(2, d, &mut rng);
            let mut mean_hat = Matrix::zeros(2, d);
            let mut mean_err = 0.0;
            for so in &sketches {
                for sn in &sketches {
                    let view = AttackView {
                        w_old: so.apply(&w_old)?,
                        w_new: sn.apply(&w_new)?,
                        s_old: Some(so.clone()),
                        s_new: Some(sn.clone()),
                        own_delta: None,
                        m: 1,
                    };
                    mean_hat.axpy(
                        1.0 / pairs,
                        &estimate_delta(&view, Estimator::Option1)?.delta_hat,
                    )?;
                    mean_err += squared_error(&w_old, &w_new, Some(&v), so, sn)? / pairs;
                }
            }
            bias_dev = bias_dev.max(mean_hat.max_abs_diff(&w_old.sub(&w_new)?));
            err_dev = err_dev.max((mean_err - expected_error_exact(&w_old, &w_new, &v, s)?).abs());
        }
        checks.push(Check::new(
            format!("unbiased estimate d={d} s={s}"),
            bias_dev,
            1e-10,
        ));
        checks.push(Check::new(
            format!("exact error d={d} s={s}"),
            err_dev,
            1e-10,
        ));
    }
    Ok(checks)
}

pub const MC_D_OUT: usize = 16;
pub const MC_DIMS: [usize; 2] = [64, 128];
pub const MC_FACTORS: [usize; 3] = [2, 4, 8];

/// Monte Carlo over `trials` sketch pairs for `d ∈ {64, 128}` and
/// `s ∈ {d/2, d/4, d/8}`: the z-score of the sample mean against the
/// `V = I` closed form (bound 4), and per `d` the relative deviation of the
/// fitted slope of normalized error against `d/s` from `(d − 1)/d` (bound 0.15).
pub fn monte_carlo_checks(seed: u64, trials: usize) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (di, &d) in MC_DIMS.iter().enumerate() {
        let mut rng = SplitMix64::new(derive_seed(seed, 100 + di as u64, 0));
        let w_old = Matrix::from_fn(MC_D_OUT, d, |_, _| rng.sample(StandardNormal));
        let w_new = Matrix::from_fn(MC_D_OUT, d, |_, _| rng.sample(StandardNormal));
        let energy = w_old.frobenius_sq() + w_new.frobenius_sq();
        let mut points = Vec::new();
        for &f in &MC_FACTORS {
            let s = d / f;
            let mc_seed = derive_seed(seed, 200 + di as u64, f as u64);
            let (mean, stderr) = monte_carlo_error(&w_old, &w_new, None, s, trials, mc_seed)?;
            let closed = expected_error_identity(&w_old, &w_new, s)?;
            let z = (mean - closed).abs() / stderr;
            checks.push(Check::new(format!("closed form d={d} s={s} (z)"), z, 4.0));
            points.push(((d / s) as f64, mean / energy));
        }
        let slope = ols_slope(&points);
        let expected = (d as f64 - 1.0) / d as f64;
        checks.push(Check::new(
            format!("error slope in d/s, d={d}"),
            (slope - expected).abs() / expected,
            0.15,
        ));
    }
    Ok(checks)
}

fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Fixed-width table, one check per line.
pub fn render_table(checks: &[Check]) -> String {
    let mut out = format!("{:<36} {:>12} {:>10}  result\n", "check", "value", "bound");
    for c in checks {
        out.push_str(&format!(
            "{:<36} {:>12.4e} {:>10.2e}  {}\n",
            c.name,
            c.value,
            c.bound,
            if c.pass { "PASS" } else { "FAIL" }
        ));
    }
    out
}
