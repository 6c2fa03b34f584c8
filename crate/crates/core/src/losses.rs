//! Processor-training objectives.
//!
//! The composite loss rewards a processor for keeping what linearly predicts
//! `y` and penalizes what linearly predicts `z`:
//!
//! ```text
//! total = (1/n0)·‖Y − W̃2·f(X_down1)‖² − λ·(1/n1)·‖Z − W̃1·f(X_pre)‖²
//! ```
//!
//! with both heads refit to their least-squares optimum on every evaluation.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cross_moment, fit_linear_ls, second_moment, solve_ridged, Matrix, RidgeParam};
use crate::models::Processor;
use crate::synthdata::Dataset;

/// Smallest pretext sample accepted as a stand-in for the population term.
pub const MIN_POPULATION_SAMPLES: usize = 20_000;

/// Strictly increasing transform applied to a distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    Square,
    Log1p,
}

impl Transform {
    #[inline]
    pub fn apply(self, d: f64) -> f64 {
        match self {
            Transform::Identity => d,
            Transform::Square => d * d,
            Transform::Log1p => d.ln_1p(),
        }
    }

    /// `g'(d)/d`, the factor multiplying the residual in the head gradient.
    /// At `d = 0` the non-smooth transforms use the zero subgradient.
    #[inline]
    fn radial_weight(self, d: f64) -> f64 {
        match self {
            Transform::Square => 2.0,
            _ if d == 0.0 => 0.0,
            Transform::Identity => 1.0 / d,
            Transform::Log1p => 1.0 / ((1.0 + d) * d),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(Transform::Identity),
            "square" => Ok(Transform::Square),
            "log1p" => Ok(Transform::Log1p),
            other => Err(Error::config(format!(
                "transform {other:?} is not one of the strictly increasing transforms identity, square, log1p"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    Euclidean,
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(Error::config(format!("unsupported distance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossFamily {
    SquaredEuclidean,
    /// `Ê g2(ρ2(y, W f)) − λ·Ê g1(ρ1(z, W f))`; evaluation only.
    General { g1: Transform, g2: Transform, rho1: Distance, rho2: Distance },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub lambda: f64,
    pub family: LossFamily,
}

impl LossSpec {
    pub fn squared(lambda: f64) -> Result<Self> {
        let s = LossSpec { lambda, family: LossFamily::SquaredEuclidean };
        s.validate()?;
        Ok(s)
    }

    /// Parses the general family from tag names, rejecting anything outside
    /// the strictly increasing transform set.
    pub fn general_from_tags(lambda: f64, g1: &str, g2: &str, rho1: &str, rho2: &str) -> Result<Self> {
        let s = LossSpec {
            lambda,
            family: LossFamily::General {
                g1: g1.parse()?,
                g2: g2.parse()?,
                rho1: rho1.parse()?,
                rho2: rho2.parse()?,
            },
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Loss value split into its two fitted terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Downstream fit residual (`L2`), nonnegative.
    pub downstream_term: f64,
    /// Pretext fit residual, nonnegative; enters the total with `−λ`.
    pub pretext_term: f64,
}

impl LossBreakdown {
    pub fn new(downstream_term: f64, pretext_term: f64, lambda: f64) -> Self {
        Self { total: downstream_term - lambda * pretext_term, downstream_term, pretext_term }
    }
}

/// Mean squared residual `(1/n)·‖T − W·F‖²`.
pub fn mean_squared_residual(w: &Matrix, features: &Matrix, targets: &Matrix) -> f64 {
    let pred = w.matmul(features);
    (targets - &pred).frobenius_norm_sq() / targets.cols() as f64
}

/// Composite loss on already-processed features. Returns the breakdown and
/// the refit heads `(W1, W2)`.
pub fn composite_from_features(
    pre_features: &Matrix,
    z: &Matrix,
    down_features: &Matrix,
    y: &Matrix,
    lambda: f64,
    ridge: RidgeParam,
) -> Result<(LossBreakdown, Matrix, Matrix)> {
    let w1 = fit_linear_ls(pre_features, z, ridge)?;
    let w2 = fit_linear_ls(down_features, y, ridge)?;
    let pre = mean_squared_residual(&w1, pre_features, z);
    let down = mean_squared_residual(&w2, down_features, y);
    Ok((LossBreakdown::new(down, pre, lambda), w1, w2))
}

fn require_squared(spec: &LossSpec) -> Result<()> {
    spec.validate()?;
    match spec.family {
        LossFamily::SquaredEuclidean => Ok(()),
        LossFamily::General { .. } => Err(Error::config("composite loss needs the squared-Euclidean family")),
    }
}

/// Training loss with heads refit on `(f(X_pre), Z_pre)` and
/// `(f(X_down1), Y_down1)`.
pub fn empirical_composite_loss(
    f: &Processor,
    pretext: &Dataset,
    down1: &Dataset,
    spec: &LossSpec,
    ridge: RidgeParam,
) -> Result<LossBreakdown> {
    require_squared(spec)?;
    let z = pretext.z()?;
    let y = down1.y()?;
    let fp = f.forward(&pretext.x)?;
    let fd = f.forward(&down1.x)?;
    composite_from_features(&fp, z, &fd, y, spec.lambda, ridge).map(|(b, _, _)| b)
}

/// Composite loss whose pretext term is taken on a large sample standing in
/// for the population.
pub fn loss_infinite_pretext(
    f: &Processor,
    pretext_large: &Dataset,
    down1: &Dataset,
    spec: &LossSpec,
    ridge: RidgeParam,
) -> Result<LossBreakdown> {
    if pretext_large.len() < MIN_POPULATION_SAMPLES {
        return Err(Error::input(format!(
            "population surrogate needs >= {MIN_POPULATION_SAMPLES} pretext samples, got {}",
            pretext_large.len()
        )));
    }
    empirical_composite_loss(f, pretext_large, down1, spec, ridge)
}

/// `(1/n)·Σ g(‖t_i − W·f_i‖)`.
fn transformed_residual(w: &Matrix, features: &Matrix, targets: &Matrix, g: Transform) -> f64 {
    let r = targets - &w.matmul(features);
    let n = r.cols();
    (0..n)
        .map(|c| {
            let d = (0..r.rows()).map(|i| r[(i, c)] * r[(i, c)]).sum::<f64>().sqrt();
            g.apply(d)
        })
        .sum::<f64>()
        / n as f64
}

const HEAD_GRAD_TOL: f64 = 1e-8;
const HEAD_MAX_ITERS: usize = 20_000;

/// Minimizes `(1/n)·Σ g(‖t_i − W·f_i‖)` over linear heads. Closed form for the
/// square transform; otherwise gradient descent with backtracking, started
/// from the least-squares head and stopped once the gradient norm or the
/// objective change drops below 1e-8.
pub fn fit_transformed_head(features: &Matrix, targets: &Matrix, g: Transform, ridge: RidgeParam) -> Result<Matrix> {
    let mut w = fit_linear_ls(features, targets, ridge)?;
    if g == Transform::Square {
        return Ok(w);
    }
    let n = features.cols() as f64;
    let mut obj = transformed_residual(&w, features, targets, g);
    let mut step = 1.0;
    for _ in 0..HEAD_MAX_ITERS {
        let mut r = targets - &w.matmul(features);
        for c in 0..r.cols() {
            let d = (0..r.rows()).map(|i| r[(i, c)] * r[(i, c)]).sum::<f64>().sqrt();
            let s = g.radial_weight(d);
            for i in 0..r.rows() {
                r[(i, c)] *= s;
            }
        }
        // ∇J = −(1/n)·Σ (g'(d)/d)·r_i·f_iᵀ
        let grad = r.matmul_nt(features).scale(-1.0 / n);
        let gnorm2 = grad.frobenius_norm_sq();
        if gnorm2.sqrt() <= HEAD_GRAD_TOL {
            break;
        }
        // Armijo backtracking.
        let mut accepted = None;
        while step > 1e-20 {
            let mut cand = w.clone();
            cand.axpy(-step, &grad);
            let c_obj = transformed_residual(&cand, features, targets, g);
            if c_obj <= obj - 1e-4 * step * gnorm2 {
                accepted = Some((cand, c_obj));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, c_obj)) = accepted else { break };
        let change = obj - c_obj;
        w = cand;
        obj = c_obj;
        step = (step * 2.0).min(1e6);
        if change <= HEAD_GRAD_TOL * HEAD_GRAD_TOL {
            break;
        }
    }
    Ok(w)
}

/// Evaluates the general loss on one dataset carrying both `Y` and `Z`,
/// fitting each head under its own transformed objective.
pub fn general_loss_eval(f: &Processor, data: &Dataset, spec: &LossSpec, ridge: RidgeParam) -> Result<LossBreakdown> {
    spec.validate()?;
    let LossFamily::General { g1, g2, .. } = spec.family else {
        return Err(Error::config("general_loss_eval needs the general family"));
    };
    let feats = f.forward(&data.x)?;
    let y = data.y()?;
    let z = data.z()?;
    let w2 = fit_transformed_head(&feats, y, g2, ridge)?;
    let w1 = fit_transformed_head(&feats, z, g1, ridge)?;
    let down = transformed_residual(&w2, &feats, y, g2);
    let pre = transformed_residual(&w1, &feats, z, g1);
    Ok(LossBreakdown::new(down, pre, spec.lambda))
}

/// `T = tr[(I − BᵀB/σ²)·Ê[zfᵀ]·(Ê[ffᵀ])⁻¹·Ê[fzᵀ]]` on σ-linear data.
pub fn t_statistic(f: &Processor, data: &Dataset, ridge: RidgeParam) -> Result<f64> {
    let (b, sigma) = data
        .sigma_linear()
        .ok_or_else(|| Error::input("T statistic needs data from the sigma-linear family"))?;
    let feats = f.forward(&data.x)?;
    t_statistic_from_features(&feats, data.z()?, b, sigma, ridge)
}

pub fn t_statistic_from_features(feats: &Matrix, z: &Matrix, b: &Matrix, sigma: f64, ridge: RidgeParam) -> Result<f64> {
    let szf = cross_moment(z, feats)?;
    let sff = second_moment(feats)?;
    let k = solve_ridged(&szf, &sff, ridge)?;
    let m = k.matmul_nt(&szf);
    let dz = z.rows();
    let btb = b.matmul_tn(b);
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut t = 0.0;
    for i in 0..dz {
        for j in 0..dz {
            let p = if i == j { 1.0 } else { 0.0 } - btb[(i, j)] * inv_s2;
            t += p * m[(j, i)];
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_processor, InitScale, ProcessorShape};
    use crate::synthdata::{sample_prefix_gaussian, sample_sigma_linear, PrefixGaussianSpec, SigmaLinearSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_prefix() -> PrefixGaussianSpec {
        PrefixGaussianSpec { dx: 12, dz: 8, dy: 3, noise_z: 0.1, noise_y: 0.1 }
    }

    #[test]
    fn breakdown_identity() {
        let b = LossBreakdown::new(1.25, 3.5, 0.3);
        assert!((b.total - (1.25 - 0.3 * 3.5)).abs() <= 1e-12);
    }

    #[test]
    fn tiny_lambda_leaves_downstream_residual() {
        let mut r = rng(1);
        let pre = sample_prefix_gaussian(&small_prefix(), 300, 0, &mut r).unwrap();
        let down = sample_prefix_gaussian(&small_prefix(), 40, 0, &mut r).unwrap();
        let f = init_processor(&ProcessorShape::Linear { input: 12, output: 4 }, InitScale::FanIn, &mut r).unwrap();
        let spec = LossSpec::squared(1e-300).unwrap();
        let b = empirical_composite_loss(&f, &pre, &down, &spec, RidgeParam::ZERO).unwrap();
        let feats = f.forward(&down.x).unwrap();
        let w = fit_linear_ls(&feats, down.y.as_ref().unwrap(), RidgeParam::ZERO).unwrap();
        let direct = mean_squared_residual(&w, &feats, down.y.as_ref().unwrap());
        assert!((b.total - direct).abs() < 1e-15);
    }

    #[test]
    fn interpolation_zeroes_downstream_term() {
        let mut r = rng(2);
        let pre = sample_prefix_gaussian(&small_prefix(), 300, 0, &mut r).unwrap();
        let down = sample_prefix_gaussian(&small_prefix(), 5, 0, &mut r).unwrap();
        let f = init_processor(&ProcessorShape::Linear { input: 12, output: 8 }, InitScale::FanIn, &mut r).unwrap();
        let spec = LossSpec::squared(0.5).unwrap();
        let b = empirical_composite_loss(&f, &pre, &down, &spec, RidgeParam::default()).unwrap();
        assert!(b.downstream_term <= 1e-8, "{}", b.downstream_term);
    }

    #[test]
    fn scalar_toy_matches_hand_solution() {
        // Pretext: f = [1, 2], z = [1, 0] → W1 = 1/5, residuals (4/5, −2/5),
        // mean square = (16/25 + 4/25)/2 = 2/5.
        // Downstream: f = [1, −1], y = [2, 1] → W2 = 1/2, residuals (3/2, 3/2),
        // mean square = 9/4.
        let pre = Dataset::new(Matrix::from_rows(&[[1.0, 2.0]]), Some(Matrix::from_rows(&[[1.0, 0.0]])), None).unwrap();
        let down = Dataset::new(Matrix::from_rows(&[[1.0, -1.0]]), None, Some(Matrix::from_rows(&[[2.0, 1.0]]))).unwrap();
        let spec = LossSpec::squared(0.5).unwrap();
        let b = empirical_composite_loss(&Processor::identity(1), &pre, &down, &spec, RidgeParam::ZERO).unwrap();
        assert!((b.pretext_term - 0.4).abs() <= 1e-12);
        assert!((b.downstream_term - 2.25).abs() <= 1e-12);
        assert!((b.total - (2.25 - 0.5 * 0.4)).abs() <= 1e-12);
    }

    #[test]
    fn missing_blocks_are_input_errors() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]);
        let no_z = Dataset::new(x.clone(), None, Some(x.clone())).unwrap();
        let spec = LossSpec::squared(0.1).unwrap();
        let r = empirical_composite_loss(&Processor::identity(1), &no_z, &no_z, &spec, RidgeParam::ZERO);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn lambda_must_be_positive() {
        assert!(matches!(LossSpec::squared(0.0), Err(Error::Config(_))));
        assert!(matches!(LossSpec::squared(-1.0), Err(Error::Config(_))));
    }

    #[test]
    fn infinite_pretext_requires_large_sample() {
        let mut r = rng(3);
        let pre = sample_prefix_gaussian(&small_prefix(), 100, 0, &mut r).unwrap();
        let spec = LossSpec::squared(0.1).unwrap();
        let f = Processor::identity(12);
        assert!(matches!(
            loss_infinite_pretext(&f, &pre, &pre, &spec, RidgeParam::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn infinite_pretext_limits() {
        let mut r = rng(4);
        let spec_data = PrefixGaussianSpec { dx: 12, dz: 8, dy: 3, noise_z: 0.0, noise_y: 0.01 };
        let large = sample_prefix_gaussian(&spec_data, 20_000, 0, &mut r).unwrap();
        let down = sample_prefix_gaussian(&spec_data, 50, 0, &mut r).unwrap();
        let spec = LossSpec::squared(0.1).unwrap();

        // Processor reading only coordinates outside the z-prefix.
        let a = Matrix::from_fn(3, 12, |i, j| if j == 8 + i { 1.0 } else { 0.0 });
        let b = loss_infinite_pretext(&Processor::linear(a), &large, &down, &spec, RidgeParam::default()).unwrap();
        let zz = large.z.as_ref().unwrap().frobenius_norm_sq() / 20_000.0;
        assert!((b.pretext_term - zz).abs() <= 0.02 * zz, "{} vs {zz}", b.pretext_term);

        // Processor copying z exactly.
        let a = Matrix::from_fn(8, 12, |i, j| if i == j { 1.0 } else { 0.0 });
        let f = Processor::linear(a);
        let b = loss_infinite_pretext(&f, &large, &down, &spec, RidgeParam::default()).unwrap();
        assert!(b.pretext_term <= 1e-10, "{}", b.pretext_term);

        let c = empirical_composite_loss(&f, &large, &down, &spec, RidgeParam::default()).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn general_square_matches_composite() {
        let mut r = rng(5);
        let data = sample_prefix_gaussian(&small_prefix(), 200, 0, &mut r).unwrap();
        let f = init_processor(&ProcessorShape::Linear { input: 12, output: 5 }, InitScale::FanIn, &mut r).unwrap();
        let general = LossSpec::general_from_tags(0.7, "square", "square", "euclidean", "euclidean").unwrap();
        let squared = LossSpec::squared(0.7).unwrap();
        let a = general_loss_eval(&f, &data, &general, RidgeParam::ZERO).unwrap();
        let b = empirical_composite_loss(&f, &data, &data, &squared, RidgeParam::ZERO).unwrap();
        assert!((a.total - b.total).abs() <= 1e-10);
    }

    #[test]
    fn general_identity_small_lambda_is_mean_norm() {
        let mut r = rng(6);
        let data = sample_prefix_gaussian(&small_prefix(), 100, 0, &mut r).unwrap();
        let f = init_processor(&ProcessorShape::Linear { input: 12, output: 4 }, InitScale::FanIn, &mut r).unwrap();
        let spec = LossSpec::general_from_tags(1e-300, "square", "identity", "euclidean", "euclidean").unwrap();
        let b = general_loss_eval(&f, &data, &spec, RidgeParam::ZERO).unwrap();
        assert!((b.total - b.downstream_term).abs() <= 1e-12);
        // The fitted head can only improve on the least-squares head.
        let feats = f.forward(&data.x).unwrap();
        let y = data.y.as_ref().unwrap();
        let ols = fit_linear_ls(&feats, y, RidgeParam::ZERO).unwrap();
        let at_ols = transformed_residual(&ols, &feats, y, Transform::Identity);
        assert!(b.downstream_term <= at_ols + 1e-12);
        assert!(b.downstream_term > 0.0);
    }

    #[test]
    fn general_log1p_two_sample_hand_value() {
        // f = [1, 0]: only the first sample is affected by the head.
        // z = [3, 2] → W1 = 3, distances (0, 2); y = [−1, 0.5] → W2 = −1,
        // distances (0, 0.5).
        let data = Dataset::new(
            Matrix::from_rows(&[[1.0, 0.0]]),
            Some(Matrix::from_rows(&[[3.0, 2.0]])),
            Some(Matrix::from_rows(&[[-1.0, 0.5]])),
        )
        .unwrap();
        let spec = LossSpec::general_from_tags(0.5, "log1p", "log1p", "euclidean", "euclidean").unwrap();
        let b = general_loss_eval(&Processor::identity(1), &data, &spec, RidgeParam::ZERO).unwrap();
        let down = 1.5f64.ln() / 2.0;
        let pre = 3.0f64.ln() / 2.0;
        assert!((b.downstream_term - down).abs() <= 1e-10);
        assert!((b.pretext_term - pre).abs() <= 1e-10);
        assert!((b.total - (down - 0.5 * pre)).abs() <= 1e-10);
    }

    #[test]
    fn general_rejects_unknown_tags() {
        assert!(matches!(
            LossSpec::general_from_tags(0.1, "neg", "square", "euclidean", "euclidean"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            LossSpec::general_from_tags(0.1, "square", "square", "manhattan", "euclidean"),
            Err(Error::Config(_))
        ));
        let data = Dataset::new(Matrix::identity(2), Some(Matrix::identity(2)), Some(Matrix::identity(2))).unwrap();
        let squared = LossSpec::squared(0.1).unwrap();
        assert!(matches!(
            general_loss_eval(&Processor::identity(2), &data, &squared, RidgeParam::ZERO),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn downstream_term_increases_with_residual_scale() {
        let mut r = rng(7);
        let data = sample_prefix_gaussian(&small_prefix(), 60, 0, &mut r).unwrap();
        let f = init_processor(&ProcessorShape::Linear { input: 12, output: 3 }, InitScale::FanIn, &mut r).unwrap();
        let feats = f.forward(&data.x).unwrap();
        let y = data.y.clone().unwrap();
        let w = fit_linear_ls(&feats, &y, RidgeParam::ZERO).unwrap();
        let fitted = w.matmul(&feats);
        let resid = &y - &fitted;
        for g in [Transform::Identity, Transform::Square, Transform::Log1p] {
            let spec = LossSpec {
                lambda: 0.1,
                family: LossFamily::General { g1: g, g2: g, rho1: Distance::Euclidean, rho2: Distance::Euclidean },
            };
            let base = general_loss_eval(&f, &data, &spec, RidgeParam::ZERO).unwrap().downstream_term;
            // Scaling the least-squares residual keeps the least-squares head
            // fixed while stretching every residual.
            let mut y2 = fitted.clone();
            y2.axpy(2.0, &resid);
            let mut d2 = data.clone();
            d2.y = Some(y2);
            let scaled = general_loss_eval(&f, &d2, &spec, RidgeParam::ZERO).unwrap().downstream_term;
            assert!(scaled > base, "{g:?}: {scaled} <= {base}");
        }
    }

    #[test]
    fn t_statistic_zero_for_label_block() {
        let mut r = rng(8);
        let spec = SigmaLinearSpec { dx: 14, dz: 10, dy: 3, sigma: 2.0, noise_z: 0.0 };
        let d = sample_sigma_linear(&spec, 400, 0, &mut r).unwrap();
        let (b, sigma) = d.sigma_linear().unwrap();
        let y = d.y.as_ref().unwrap();
        let t = t_statistic_from_features(y, d.z.as_ref().unwrap(), b, sigma, RidgeParam::ZERO).unwrap();
        assert!(t.abs() <= 1e-8, "{t}");
    }

    #[test]
    fn t_statistic_needs_sigma_linear_data() {
        let mut r = rng(9);
        let d = sample_prefix_gaussian(&small_prefix(), 50, 0, &mut r).unwrap();
        assert!(matches!(t_statistic(&Processor::identity(12), &d, RidgeParam::ZERO), Err(Error::Input(_))));
    }
}
