//! Criterion checks, the moment identities of the σ-linear family, and the
//! interpolation capacity probe.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fit_linear_ls, partial_covariance, Matrix, RidgeParam};
use crate::losses::{composite_from_features, mean_squared_residual, t_statistic_from_features};
use crate::models::{init_processor, Activation, InitScale, Processor, ProcessorShape};
use crate::synthdata::Dataset;

/// Evaluation samples required per feature for a stable partial covariance.
pub const C1_SAMPLES_PER_FEATURE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriteriaReport {
    /// Frobenius norm of the partial covariance of `(f(x), z | y)`.
    pub c1_residual: f64,
    /// Excess downstream fit error of `f(x)` over raw `x`.
    pub c2_gap: f64,
    /// Best linear fit error of `z` from `f(x)`.
    pub pretext_fit: f64,
    pub samples: usize,
}

impl CriteriaReport {
    pub fn evaluate(f: &Processor, data: &Dataset, ridge: RidgeParam) -> Result<Self> {
        let feats = f.forward(&data.x)?;
        let z = data.z()?;
        let w1 = fit_linear_ls(&feats, z, ridge)?;
        Ok(Self {
            c1_residual: c1_from_features(&feats, data, ridge)?,
            c2_gap: c2_from_features(&feats, data, ridge)?,
            pretext_fit: mean_squared_residual(&w1, &feats, z),
            samples: data.len(),
        })
    }
}

pub fn c1_residual(f: &Processor, data: &Dataset, ridge: RidgeParam) -> Result<f64> {
    c1_from_features(&f.forward(&data.x)?, data, ridge)
}

fn c1_from_features(feats: &Matrix, data: &Dataset, ridge: RidgeParam) -> Result<f64> {
    let need = C1_SAMPLES_PER_FEATURE * feats.rows();
    if data.len() < need {
        return Err(Error::input(format!(
            "partial covariance needs >= {need} samples for {} features, got {}",
            feats.rows(),
            data.len()
        )));
    }
    Ok(partial_covariance(feats, data.z()?, data.y()?, ridge)?.frobenius_norm())
}

/// `min_W Ê‖y − W·f(x)‖² − min_W Ê‖y − W·x‖²`. Slightly negative values are
/// sampling noise.
pub fn c2_gap(f: &Processor, data: &Dataset, ridge: RidgeParam) -> Result<f64> {
    c2_from_features(&f.forward(&data.x)?, data, ridge)
}

fn c2_from_features(feats: &Matrix, data: &Dataset, ridge: RidgeParam) -> Result<f64> {
    let y = data.y()?;
    let wf = fit_linear_ls(feats, y, ridge)?;
    let wx = fit_linear_ls(&data.x, y, ridge)?;
    Ok(mean_squared_residual(&wf, feats, y) - mean_squared_residual(&wx, &data.x, y))
}

/// Residuals of the two loss decompositions on σ-linear data, computed from
/// one set of fitted heads:
///
/// 1. `total = (1 − λ/σ²)·L2 + λ·(L1 + L2/σ²)`
/// 2. `L1 + L2/σ² = T + Ê‖y‖²/σ² − Ê‖z‖²`
///
/// with `L2` the downstream residual and `L1` the negated pretext residual,
/// both on the same sample. Returns the larger residual.
pub fn moment_identity_check(f: &Processor, data: &Dataset, lambda: f64, ridge: RidgeParam) -> Result<f64> {
    let (b, sigma) = data
        .sigma_linear()
        .ok_or_else(|| Error::input("moment identities need data from the sigma-linear family"))?;
    let feats = f.forward(&data.x)?;
    let z = data.z()?;
    let y = data.y()?;
    let n = data.len() as f64;
    let (loss, _, _) = composite_from_features(&feats, z, &feats, y, lambda, ridge)?;
    let s2 = sigma * sigma;
    let l2 = loss.downstream_term;
    let l1 = -loss.pretext_term;
    let first = (loss.total - ((1.0 - lambda / s2) * l2 + lambda * (l1 + l2 / s2))).abs();
    let t = t_statistic_from_features(&feats, z, b, sigma, ridge)?;
    let yy = y.frobenius_norm_sq() / n;
    let zz = z.frobenius_norm_sq() / n;
    let second = ((l1 + l2 / s2) - (t + yy / s2 - zz)).abs();
    Ok(first.max(second))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CapacityClass {
    /// `x ↦ wᵀx` on `d` inputs, fit in closed form.
    Linear { d: usize },
    /// Scalar-output network fit by full-batch gradient descent.
    Mlp { widths: Vec<usize>, activation: Activation },
}

impl CapacityClass {
    pub fn input_dim(&self) -> usize {
        match self {
            CapacityClass::Linear { d } => *d,
            CapacityClass::Mlp { widths, .. } => widths[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityProbeSpec {
    pub class: CapacityClass,
    /// Samples to interpolate per trial.
    pub n: usize,
    pub trials: usize,
    /// Gradient steps per trial (MLP only).
    pub budget: usize,
    pub learning_rate: f64,
    /// Success when the mean squared training residual is at most this.
    pub success_tol: f64,
    pub seed: u64,
}

impl CapacityProbeSpec {
    pub fn linear(d: usize, n: usize, trials: usize, success_tol: f64) -> Self {
        Self { class: CapacityClass::Linear { d }, n, trials, budget: 0, learning_rate: 0.0, success_tol, seed: 0 }
    }

    /// Two-layer tanh network `d → k → 1`.
    pub fn two_layer_tanh(d: usize, k: usize, n: usize, trials: usize, budget: usize, success_tol: f64) -> Self {
        Self {
            class: CapacityClass::Mlp { widths: vec![d, k, 1], activation: Activation::Tanh },
            n,
            trials,
            budget,
            learning_rate: 0.1,
            success_tol,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials must be >= 1"));
        }
        if self.n == 0 {
            return Err(Error::config("n must be >= 1"));
        }
        if !(self.success_tol > 0.0) {
            return Err(Error::config("success_tol must be positive"));
        }
        match &self.class {
            CapacityClass::Linear { d } if *d == 0 => Err(Error::config("input dimension must be >= 1")),
            CapacityClass::Linear { .. } => Ok(()),
            CapacityClass::Mlp { widths, activation } => {
                ProcessorShape::Mlp { widths: widths.clone(), activation: *activation }.validate()?;
                if widths.last() != Some(&1) {
                    return Err(Error::config("capacity probe networks have scalar output"));
                }
                if self.budget == 0 || !(self.learning_rate > 0.0) {
                    return Err(Error::config("network probes need budget >= 1 and learning_rate > 0"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub success_rate: f64,
    /// Final mean squared training residual per trial.
    pub residuals: Vec<f64>,
}

/// Seed of trial `i`, derived from the spec seed only.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    splitmix64(seed ^ splitmix64(trial as u64 + 1))
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fraction of trials in which the class drives the training residual on `n`
/// Gaussian inputs with Gaussian scalar labels to `success_tol` or below.
pub fn capacity_probe(spec: &CapacityProbeSpec) -> Result<CapacityReport> {
    spec.validate()?;
    let residuals = (0..spec.trials)
        .into_par_iter()
        .map(|t| probe_trial(spec, trial_seed(spec.seed, t)))
        .collect::<Result<Vec<f64>>>()?;
    let hits = residuals.iter().filter(|r| **r <= spec.success_tol).count();
    Ok(CapacityReport { success_rate: hits as f64 / spec.trials as f64, residuals })
}

fn probe_trial(spec: &CapacityProbeSpec, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.class.input_dim();
    let x = Matrix::standard_normal(d, spec.n, &mut rng);
    let y = Matrix::standard_normal(1, spec.n, &mut rng);
    match &spec.class {
        CapacityClass::Linear { .. } => {
            // Least-squares (minimum-norm when n <= d) solve of Xᵀw = y.
            let xt = x.transpose().to_nalgebra();
            let yt = y.transpose().to_nalgebra();
            let w = xt
                .svd(true, true)
                .solve(&yt, 1e-12)
                .map_err(|e| Error::Singular(e.to_string()))?;
            let w = Matrix::from_nalgebra(&w.transpose());
            Ok(mean_squared_residual(&w, &x, &y))
        }
        CapacityClass::Mlp { widths, activation } => {
            let shape = ProcessorShape::Mlp { widths: widths.clone(), activation: *activation };
            let mut f = init_processor(&shape, InitScale::FanIn, &mut rng)?;
            fit_network(&mut f, &x, &y, spec.budget, spec.learning_rate, spec.success_tol)
        }
    }
}

/// Full-batch gradient descent on `(1/n)‖y − f(X)‖²`; stops early once the
/// residual reaches `tol`. Returns the final residual.
fn fit_network(f: &mut Processor, x: &Matrix, y: &Matrix, budget: usize, lr: f64, tol: f64) -> Result<f64> {
    let n = x.cols() as f64;
    let mut theta = f.params();
    for _ in 0..budget {
        let r = y - &f.forward(x)?;
        let mse = r.frobenius_norm_sq() / n;
        if mse <= tol || !mse.is_finite() {
            return Ok(mse);
        }
        let grad = f.gradient(x, &r.scale(-2.0 / n))?;
        theta.axpy(-lr, &grad);
        f.set_params(&theta)?;
    }
    let r = y - &f.forward(x)?;
    Ok(r.frobenius_norm_sq() / n)
}
