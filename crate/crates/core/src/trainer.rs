//! Block-coordinate training of a processor against the composite loss.
//!
//! Each outer step refits the two linear heads, then takes one full-batch
//! gradient step on the processor with the heads held fixed. At exactly refit
//! heads this is the gradient of the refit-inclusive loss (envelope theorem),
//! so no derivative of the head solve is needed.
//!
//! Linear processors train on sufficient statistics: every quantity the loss
//! needs is a function of `Ê[xxᵀ]`, `Ê[zxᵀ]` and `Ê[yxᵀ]`, computed once.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cross_moment, fit_linear_ls, second_moment, solve_ridged, Matrix, RidgeParam};
use crate::losses::{empirical_composite_loss, LossBreakdown, LossFamily, LossSpec};
use crate::models::{ParamVector, Processor};
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeadMode {
    /// Closed-form least-squares heads at every step.
    ExactRefit,
    /// A fixed number of gradient steps from zero heads.
    InnerGd { steps: usize, lr: f64 },
}

impl HeadMode {
    /// 20 inner steps at learning rate 0.1.
    pub fn inner_gd_default() -> Self {
        HeadMode::InnerGd { steps: 20, lr: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub outer_steps: usize,
    pub learning_rate: f64,
    pub head_mode: HeadMode,
    pub ridge: RidgeParam,
    /// Stop once the total loss changes by less than this between steps.
    pub convergence_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_steps: 2000,
            learning_rate: 0.005,
            head_mode: HeadMode::ExactRefit,
            ridge: RidgeParam::default(),
            convergence_tol: 1e-12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_steps == 0 {
            return Err(Error::config("outer_steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if let HeadMode::InnerGd { steps, lr } = self.head_mode {
            if steps == 0 || !(lr > 0.0) {
                return Err(Error::config("inner head descent needs steps >= 1 and lr > 0"));
            }
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::config("convergence_tol must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    StepBudget,
    Converged,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<TraceStep>,
    /// Loss of the returned processor, re-evaluated from raw samples.
    pub final_loss: Option<LossBreakdown>,
    pub stop: StopReason,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "total", "downstream_term", "pretext_term", "grad_norm", "ms"])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.loss.total.to_string(),
                s.loss.downstream_term.to_string(),
                s.loss.pretext_term.to_string(),
                s.grad_norm.to_string(),
                format!("{:.3}", s.elapsed_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Head for targets `t` on features `f`, given `Ê[tfᵀ]` and `Ê[ffᵀ]`.
fn head_from_moments(stf: &Matrix, sff: &Matrix, mode: HeadMode, ridge: RidgeParam) -> Result<Matrix> {
    match mode {
        HeadMode::ExactRefit => solve_ridged(stf, sff, ridge),
        HeadMode::InnerGd { steps, lr } => {
            // ∇_W (1/n)‖T − W·F‖² = −2·(Ê[tfᵀ] − W·Ê[ffᵀ])
            let mut w = Matrix::zeros(stf.rows(), stf.cols());
            for _ in 0..steps {
                let resid = stf - &w.matmul(sff);
                w.axpy(2.0 * lr, &resid);
            }
            Ok(w)
        }
    }
}

/// Pretext head `W1` (dz × df) and downstream head `W2` (dy × df).
pub fn fit_heads(
    f: &Processor,
    pretext: &Dataset,
    down1: &Dataset,
    mode: HeadMode,
    ridge: RidgeParam,
) -> Result<(Matrix, Matrix)> {
    let fp = f.forward(&pretext.x)?;
    let fd = f.forward(&down1.x)?;
    let z = pretext.z()?;
    let y = down1.y()?;
    match mode {
        HeadMode::ExactRefit => Ok((fit_linear_ls(&fp, z, ridge)?, fit_linear_ls(&fd, y, ridge)?)),
        HeadMode::InnerGd { .. } => {
            let w1 = head_from_moments(&cross_moment(z, &fp)?, &second_moment(&fp)?, mode, ridge)?;
            let w2 = head_from_moments(&cross_moment(y, &fd)?, &second_moment(&fd)?, mode, ridge)?;
            Ok((w1, w2))
        }
    }
}

/// Moments of one (input, target) block pair.
struct BlockMoments {
    sxx: Matrix,
    stx: Matrix,
    tt: f64,
}

impl BlockMoments {
    fn new(x: &Matrix, t: &Matrix) -> Result<Self> {
        Ok(Self {
            sxx: second_moment(x)?,
            stx: cross_moment(t, x)?,
            tt: t.frobenius_norm_sq() / t.cols() as f64,
        })
    }

    /// Residual and `∂residual/∂A` for the linear processor `A` with the head
    /// chosen by `mode` and then held fixed.
    fn residual_and_grad(&self, a: &Matrix, mode: HeadMode, ridge: RidgeParam) -> Result<(f64, Matrix)> {
        let a_sxx = a.matmul(&self.sxx);
        let mut sff = a_sxx.matmul_nt(a);
        sff.symmetrize();
        let stf = self.stx.matmul_nt(a);
        let w = head_from_moments(&stf, &sff, mode, ridge)?;
        // (1/n)‖T − W·A·X‖² = tt − 2·tr(W·Stfᵀ) + tr(W·Sff·Wᵀ)
        let cross: f64 = w.as_slice().iter().zip(stf.as_slice()).map(|(p, q)| p * q).sum();
        let w_sff = w.matmul(&sff);
        let quad: f64 = w_sff.as_slice().iter().zip(w.as_slice()).map(|(p, q)| p * q).sum();
        let resid = self.tt - 2.0 * cross + quad;
        // ∂/∂A = −2·Wᵀ·(Stx − W·A·Sxx)
        let inner = &self.stx - &w.matmul(&a_sxx);
        let grad = w.matmul_tn(&inner).scale(-2.0);
        Ok((resid, grad))
    }
}

/// Loss-and-gradient oracle for one training problem.
pub struct Objective<'a> {
    pretext: &'a Dataset,
    down1: &'a Dataset,
    lambda: f64,
    ridge: RidgeParam,
    head_mode: HeadMode,
    moments: Option<(BlockMoments, BlockMoments)>,
}

impl<'a> Objective<'a> {
    pub fn new(
        pretext: &'a Dataset,
        down1: &'a Dataset,
        spec: &LossSpec,
        head_mode: HeadMode,
        ridge: RidgeParam,
    ) -> Result<Self> {
        spec.validate()?;
        if !matches!(spec.family, LossFamily::SquaredEuclidean) {
            return Err(Error::config("processor training supports the squared-Euclidean family only"));
        }
        pretext.z()?;
        down1.y()?;
        Ok(Self { pretext, down1, lambda: spec.lambda, ridge, head_mode, moments: None })
    }

    /// Precomputes sufficient statistics so linear processors skip the raw
    /// samples entirely.
    pub fn with_linear_moments(mut self) -> Result<Self> {
        let pre = BlockMoments::new(&self.pretext.x, self.pretext.z()?)?;
        let down = BlockMoments::new(&self.down1.x, self.down1.y()?)?;
        self.moments = Some((pre, down));
        Ok(self)
    }

    /// Loss at `f` and its gradient with respect to the processor
    /// parameters, heads held at their fitted values.
    pub fn loss_and_gradient(&self, f: &Processor) -> Result<(LossBreakdown, ParamVector)> {
        if let (Some((pre, down)), Processor::Linear(lin)) = (&self.moments, f) {
            let a = &lin.weights;
            if a.cols() != pre.sxx.rows() {
                return Err(Error::input("processor input width does not match the data"));
            }
            let (r_pre, g_pre) = pre.residual_and_grad(a, self.head_mode, self.ridge)?;
            let (r_down, g_down) = down.residual_and_grad(a, self.head_mode, self.ridge)?;
            let mut g = g_down;
            g.axpy(-self.lambda, &g_pre);
            return Ok((LossBreakdown::new(r_down, r_pre, self.lambda), ParamVector(g.into_vec())));
        }
        self.generic(f)
    }

    /// Sample-based path through `forward` and `gradient`.
    pub fn generic(&self, f: &Processor) -> Result<(LossBreakdown, ParamVector)> {
        let z = self.pretext.z()?;
        let y = self.down1.y()?;
        let fp = f.forward(&self.pretext.x)?;
        let fd = f.forward(&self.down1.x)?;
        let (w1, w2) = match self.head_mode {
            HeadMode::ExactRefit => (fit_linear_ls(&fp, z, self.ridge)?, fit_linear_ls(&fd, y, self.ridge)?),
            mode => (
                head_from_moments(&cross_moment(z, &fp)?, &second_moment(&fp)?, mode, self.ridge)?,
                head_from_moments(&cross_moment(y, &fd)?, &second_moment(&fd)?, mode, self.ridge)?,
            ),
        };
        let rp = z - &w1.matmul(&fp);
        let rd = y - &w2.matmul(&fd);
        let n1 = fp.cols() as f64;
        let n0 = fd.cols() as f64;
        let loss = LossBreakdown::new(rd.frobenius_norm_sq() / n0, rp.frobenius_norm_sq() / n1, self.lambda);
        // ∂total/∂f(X_down1) = −(2/n0)·W2ᵀ·Rd,  ∂total/∂f(X_pre) = (2λ/n1)·W1ᵀ·Rp
        let up_d = w2.matmul_tn(&rd).scale(-2.0 / n0);
        let up_p = w1.matmul_tn(&rp).scale(2.0 * self.lambda / n1);
        let mut g = f.gradient(&self.down1.x, &up_d)?;
        g.axpy(1.0, &f.gradient(&self.pretext.x, &up_p)?);
        Ok((loss, g))
    }
}

/// Magnitude beyond which (relative to the first step) training is declared
/// divergent.
const DIVERGENCE_FACTOR: f64 = 1e6;

/// Full-batch gradient descent on the processor. Returns the trained
/// processor and the per-step trace.
pub fn train_processor(
    f0: &Processor,
    pretext: &Dataset,
    down1: &Dataset,
    spec: &LossSpec,
    cfg: &TrainConfig,
) -> Result<(Processor, TrainTrace)> {
    cfg.validate()?;
    let mut objective = Objective::new(pretext, down1, spec, cfg.head_mode, cfg.ridge)?;
    if matches!(f0, Processor::Linear(_)) {
        objective = objective.with_linear_moments()?;
    }
    let start = Instant::now();
    let mut f = f0.clone();
    let mut theta = f.params();
    let mut trace = TrainTrace { steps: Vec::new(), final_loss: None, stop: StopReason::StepBudget };
    let mut initial: Option<f64> = None;
    let mut previous: Option<f64> = None;
    for step in 0..cfg.outer_steps {
        let (loss, grad) = match objective.loss_and_gradient(&f) {
            Ok(v) => v,
            // The starting point evaluated cleanly, so a later numeric
            // breakdown comes from the trajectory.
            Err(Error::Singular(_)) if step > 0 => {
                trace.stop = StopReason::Diverged;
                return Err(Error::Divergence { step, trace: Box::new(trace) });
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grad.norm();
        trace.steps.push(TraceStep { step, loss, grad_norm, elapsed_ms: start.elapsed().as_secs_f64() * 1e3 });

        let scale = initial.get_or_insert(loss.total.abs()).max(1e-12);
        if !loss.total.is_finite() || !grad_norm.is_finite() || loss.total.abs() > DIVERGENCE_FACTOR * scale {
            trace.stop = StopReason::Diverged;
            return Err(Error::Divergence { step, trace: Box::new(trace) });
        }
        if let Some(prev) = previous {
            if (loss.total - prev).abs() < cfg.convergence_tol {
                trace.stop = StopReason::Converged;
                break;
            }
        }
        previous = Some(loss.total);
        theta.axpy(-cfg.learning_rate, &grad);
        if theta.as_slice().iter().any(|v| !v.is_finite()) {
            trace.stop = StopReason::Diverged;
            return Err(Error::Divergence { step: step + 1, trace: Box::new(trace) });
        }
        f.set_params(&theta)?;
    }
    trace.final_loss = Some(empirical_composite_loss(&f, pretext, down1, spec, cfg.ridge)?);
    Ok((f, trace))
}

/// Largest parameter count accepted by [`gradient_check`].
pub const GRADIENT_CHECK_MAX_PARAMS: usize = 500;

/// Compares the envelope gradient with central finite differences of the
/// refit-inclusive loss.
///
/// Per coordinate the discrepancy is `|a − n| / max(|a|, |n|, 1e-3·‖n‖∞)`;
/// the floor keeps near-zero coordinates from dominating. Returns the
/// largest discrepancy.
pub fn gradient_check(
    f: &Processor,
    pretext: &Dataset,
    down1: &Dataset,
    spec: &LossSpec,
    ridge: RidgeParam,
) -> Result<f64> {
    let objective = Objective::new(pretext, down1, spec, HeadMode::ExactRefit, ridge)?;
    let (_, analytic) = objective.generic(f)?;
    let numeric = finite_difference_gradient(f, pretext, down1, spec, ridge, 1e-5)?;
    Ok(max_relative_discrepancy(analytic.as_slice(), &numeric))
}

pub fn finite_difference_gradient(
    f: &Processor,
    pretext: &Dataset,
    down1: &Dataset,
    spec: &LossSpec,
    ridge: RidgeParam,
    h: f64,
) -> Result<Vec<f64>> {
    let theta = f.params();
    if theta.len() > GRADIENT_CHECK_MAX_PARAMS {
        return Err(Error::input(format!(
            "gradient check is limited to {GRADIENT_CHECK_MAX_PARAMS} parameters, model has {}",
            theta.len()
        )));
    }
    let mut probe = f.clone();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t.0[i] = theta.0[i] + h;
        probe.set_params(&t)?;
        let plus = empirical_composite_loss(&probe, pretext, down1, spec, ridge)?.total;
        t.0[i] = theta.0[i] - h;
        probe.set_params(&t)?;
        let minus = empirical_composite_loss(&probe, pretext, down1, spec, ridge)?.total;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

pub fn max_relative_discrepancy(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
