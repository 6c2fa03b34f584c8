//! The two-step SSL pipeline and its processor-augmented variant.
//!
//! Standard SSL learns a linear representation `ψ̂` from the pretext pair
//! `(X_pre, Z_pre)`, then a linear head `Ŵ` on `ψ̂(X_down)`. The processor
//! variant first trains `f` on the pretext data and a slice of the downstream
//! data, then runs the same two steps on `f(x)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{CriteriaReport, C1_SAMPLES_PER_FEATURE};
use crate::error::{Error, Result};
use crate::linalg::{fit_linear_ls, Matrix, RidgeParam};
use crate::losses::{mean_squared_residual, LossFamily, LossSpec};
use crate::models::{init_processor, prefix_processor, InitScale, Processor, ProcessorShape};
use crate::synthdata::{
    sample_prefix_gaussian, split_downstream, Dataset, PrefixGaussianSpec, SigmaLinearSpec, SplitConfig,
};
use crate::trainer::{train_processor, TrainConfig, TrainTrace};

/// Default number of fresh test samples.
pub const DEFAULT_TEST_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DistributionSpec {
    PrefixGaussian(PrefixGaussianSpec),
    SigmaLinear(SigmaLinearSpec),
}

impl DistributionSpec {
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            DistributionSpec::PrefixGaussian(s) => (s.dx, s.dz, s.dy),
            DistributionSpec::SigmaLinear(s) => (s.dx, s.dz, s.dy),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistributionSpec::PrefixGaussian(s) => s.validate(),
            DistributionSpec::SigmaLinear(s) => s.validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProcessorInit {
    Random(InitScale),
    /// Coordinate selection `x ↦ x[0:df]`, the identity when `df = dx`; see
    /// [`prefix_processor`].
    Prefix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessorSetup {
    pub shape: ProcessorShape,
    pub init: ProcessorInit,
    /// Skip processor training and use the initial map as is.
    pub frozen: bool,
}

impl ProcessorSetup {
    /// Trainable linear processor with fan-in random initialization.
    pub fn linear(dx: usize, df: usize) -> Self {
        Self {
            shape: ProcessorShape::Linear { input: dx, output: df },
            init: ProcessorInit::Random(InitScale::FanIn),
            frozen: false,
        }
    }

    /// Trainable processor started at the prefix selection `x ↦ x[0:df]`.
    pub fn prefix(shape: ProcessorShape) -> Self {
        Self { shape, init: ProcessorInit::Prefix, frozen: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub distribution: DistributionSpec,
    pub n1: usize,
    pub n2: usize,
    pub nt: usize,
    pub split: SplitConfig,
    pub loss: LossSpec,
    pub train: TrainConfig,
    /// `None` runs standard SSL.
    pub processor: Option<ProcessorSetup>,
    /// Draw the `n0` processor-training samples fresh instead of splitting
    /// them off the `n2` downstream samples.
    pub extra_down1: bool,
    pub ridge: RidgeParam,
}

impl PipelineConfig {
    /// Prefix-Gaussian reference dimensions, `n1 = 20000`, `λ = 0.1`,
    /// `n2 = 2·n0` and a prefix-initialized linear processor with `df = 5`.
    pub fn reference(n0: usize) -> Self {
        let dist = PrefixGaussianSpec::reference();
        Self {
            distribution: DistributionSpec::PrefixGaussian(dist),
            n1: 20_000,
            n2: 2 * n0,
            nt: DEFAULT_TEST_SAMPLES,
            split: SplitConfig { n0, alpha: Some(0.5) },
            loss: LossSpec { lambda: 0.1, family: LossFamily::SquaredEuclidean },
            train: TrainConfig::default(),
            processor: Some(ProcessorSetup::prefix(ProcessorShape::Linear { input: dist.dx, output: 5 })),
            extra_down1: false,
            ridge: RidgeParam::default(),
        }
    }

    /// Same data settings without a processor.
    pub fn standard(&self) -> Self {
        Self { processor: None, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.distribution.validate()?;
        self.loss.validate()?;
        if self.nt == 0 {
            return Err(Error::input("nt must be >= 1"));
        }
        if self.n1 == 0 || self.n2 == 0 {
            return Err(Error::input("n1 and n2 must be >= 1"));
        }
        let (dx, dz, _) = self.distribution.dims();
        if let DistributionSpec::SigmaLinear(_) = self.distribution {
            if self.n1 < dz {
                return Err(Error::input(format!("sigma-linear pretext needs n1 >= dz = {dz}")));
            }
        }
        if let Some(p) = &self.processor {
            self.train.validate()?;
            p.shape.validate()?;
            if p.shape.input_dim() != dx {
                return Err(Error::config(format!(
                    "processor input width {} does not match dx = {dx}",
                    p.shape.input_dim()
                )));
            }
            if self.split.n0 == 0 {
                return Err(Error::input("n0 must be >= 1"));
            }
            if !self.extra_down1 && self.n2 <= self.split.n0 {
                return Err(Error::input(format!("need n2 > n0, got n2 = {}, n0 = {}", self.n2, self.split.n0)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslResult {
    /// Trained processor; `None` for standard SSL.
    pub processor: Option<Processor>,
    /// Linear representation `ψ̂`, `dz × k` on the (processed) input.
    pub representation: Matrix,
    /// Downstream head `Ŵ`, `dy × dz`.
    pub head: Matrix,
    pub test_mse: f64,
    /// Criteria on the test sample; absent when it is too small for the
    /// feature width.
    pub diagnostics: Option<CriteriaReport>,
    pub trace: Option<TrainTrace>,
    pub n1: usize,
    pub n2: usize,
    pub n0: usize,
    pub nt: usize,
}

/// `ψ̂ = argmin_ψ (1/n1)‖Z_pre − ψ·F‖²` over linear maps.
pub fn train_representation(features: &Matrix, z_pre: &Matrix, ridge: RidgeParam) -> Result<Matrix> {
    fit_linear_ls(features, z_pre, ridge)
}

/// `Ŵ = argmin_W (1/n)‖Y − W·ψ̂·F‖²`.
pub fn train_downstream_head(
    representation: &Matrix,
    features: &Matrix,
    y: &Matrix,
    ridge: RidgeParam,
) -> Result<Matrix> {
    if features.cols() == 0 {
        return Err(Error::input("downstream head needs at least one sample"));
    }
    fit_linear_ls(&representation.matmul(features), y, ridge)
}

/// `(1/nt)·‖Ŵ·ψ̂·f(X_test) − Y_test‖²`.
pub fn evaluate_mse(representation: &Matrix, head: &Matrix, f: Option<&Processor>, test: &Dataset) -> Result<f64> {
    let y = test.y()?;
    let feats = match f {
        Some(f) => f.forward(&test.x)?,
        None => test.x.clone(),
    };
    let reps = representation.matmul(&feats);
    Ok(mean_squared_residual(head, &reps, y))
}

/// Pretext, downstream and test samples, drawn in that order.
struct Samples {
    pretext: Dataset,
    down: Dataset,
    test: Dataset,
    /// Draws further samples from the same distribution.
    extra: Extra,
}

enum Extra {
    Prefix(PrefixGaussianSpec),
    Sigma(crate::synthdata::SigmaLinearModel, Matrix),
}

impl Extra {
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        match self {
            Extra::Prefix(spec) => sample_prefix_gaussian(spec, n, 0, rng),
            Extra::Sigma(model, w) => model.sample_with_whitener(n, w, 0, rng),
        }
    }
}

/// For the σ-linear family the whitening matrix is estimated on the pretext
/// sample and shared, so downstream samples may be smaller than `dz`.
fn draw_samples<R: Rng + ?Sized>(cfg: &PipelineConfig, rng: &mut R) -> Result<Samples> {
    match cfg.distribution {
        DistributionSpec::PrefixGaussian(spec) => {
            let pretext = sample_prefix_gaussian(&spec, cfg.n1, 0, rng)?;
            let down = sample_prefix_gaussian(&spec, cfg.n2, 0, rng)?;
            let test = sample_prefix_gaussian(&spec, cfg.nt, 0, rng)?;
            Ok(Samples { pretext, down, test, extra: Extra::Prefix(spec) })
        }
        DistributionSpec::SigmaLinear(spec) => {
            let model = spec.realize(rng)?;
            let (pretext, w) = model.sample_whitening(cfg.n1, 0, rng)?;
            let down = model.sample_with_whitener(cfg.n2, &w, 0, rng)?;
            let test = model.sample_with_whitener(cfg.nt, &w, 0, rng)?;
            Ok(Samples { pretext, down, test, extra: Extra::Sigma(model, w) })
        }
    }
}

fn criteria(f: Option<&Processor>, test: &Dataset, ridge: RidgeParam) -> Result<Option<CriteriaReport>> {
    let width = f.map_or(test.x.rows(), Processor::output_dim);
    if test.len() < C1_SAMPLES_PER_FEATURE * width {
        return Ok(None);
    }
    let identity;
    let f = match f {
        Some(f) => f,
        None => {
            identity = Processor::identity(test.x.rows());
            &identity
        }
    };
    CriteriaReport::evaluate(f, test, ridge).map(Some)
}

/// Trains `ψ̂` on the pretext data and `Ŵ` on all `n2` downstream samples.
pub fn run_standard_ssl<R: Rng + ?Sized>(cfg: &PipelineConfig, rng: &mut R) -> Result<SslResult> {
    if cfg.processor.is_some() {
        return Err(Error::config("standard SSL runs without a processor"));
    }
    cfg.validate()?;
    let s = draw_samples(cfg, rng)?;
    let representation = train_representation(&s.pretext.x, s.pretext.z()?, cfg.ridge)?;
    let head = train_downstream_head(&representation, &s.down.x, s.down.y()?, cfg.ridge)?;
    let test_mse = evaluate_mse(&representation, &head, None, &s.test)?;
    Ok(SslResult {
        processor: None,
        representation,
        head,
        test_mse,
        diagnostics: criteria(None, &s.test, cfg.ridge)?,
        trace: None,
        n1: cfg.n1,
        n2: cfg.n2,
        n0: 0,
        nt: cfg.nt,
    })
}

fn initial_processor<R: Rng + ?Sized>(setup: &ProcessorSetup, rng: &mut R) -> Result<Processor> {
    match setup.init {
        ProcessorInit::Random(scale) => init_processor(&setup.shape, scale, rng),
        ProcessorInit::Prefix => prefix_processor(&setup.shape, rng),
    }
}

/// Trains the processor on `(pretext, down1)`, then runs SSL on `f(x)` with
/// the head fit on `down2`.
pub fn run_processor_ssl<R: Rng + ?Sized>(cfg: &PipelineConfig, rng: &mut R) -> Result<SslResult> {
    let setup = cfg.processor.as_ref().ok_or_else(|| Error::config("processor SSL needs a processor shape"))?;
    cfg.validate()?;
    let n0 = cfg.split.n0;
    let s = draw_samples(cfg, rng)?;
    let (down1, down2) = if cfg.extra_down1 {
        (s.extra.sample(n0, rng)?, s.down)
    } else {
        split_downstream(&s.down, &cfg.split, rng)?
    };
    let f0 = initial_processor(setup, rng)?;
    let (f, trace) = if setup.frozen {
        (f0, None)
    } else {
        let (f, t) = train_processor(&f0, &s.pretext, &down1, &cfg.loss, &cfg.train)?;
        (f, Some(t))
    };
    let representation = train_representation(&f.forward(&s.pretext.x)?, s.pretext.z()?, cfg.ridge)?;
    let head = train_downstream_head(&representation, &f.forward(&down2.x)?, down2.y()?, cfg.ridge)?;
    let test_mse = evaluate_mse(&representation, &head, Some(&f), &s.test)?;
    let diagnostics = criteria(Some(&f), &s.test, cfg.ridge)?;
    Ok(SslResult {
        processor: Some(f),
        representation,
        head,
        test_mse,
        diagnostics,
        trace,
        n1: cfg.n1,
        n2: cfg.n2,
        n0,
        nt: cfg.nt,
    })
}

/// Dispatches on whether the config carries a processor.
pub fn run_pipeline<R: Rng + ?Sized>(cfg: &PipelineConfig, rng: &mut R) -> Result<SslResult> {
    match cfg.processor {
        Some(_) => run_processor_ssl(cfg, rng),
        None => run_standard_ssl(cfg, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small() -> PipelineConfig {
        let dist = PrefixGaussianSpec { dx: 12, dz: 8, dy: 2, noise_z: 0.01, noise_y: 0.01 };
        PipelineConfig {
            distribution: DistributionSpec::PrefixGaussian(dist),
            n1: 2000,
            n2: 40,
            nt: 500,
            split: SplitConfig::fixed(20),
            loss: LossSpec::squared(0.1).unwrap(),
            train: TrainConfig { outer_steps: 200, ..TrainConfig::default() },
            processor: Some(ProcessorSetup::linear(12, 2)),
            extra_down1: false,
            ridge: RidgeParam::default(),
        }
    }

    #[test]
    fn representation_of_targets_is_identity() {
        let z = Matrix::standard_normal(4, 50, &mut rng(1));
        let psi = train_representation(&z, &z, RidgeParam::default()).unwrap();
        assert!(psi.max_abs_diff(&Matrix::identity(4)) <= 1e-8);
    }

    #[test]
    fn head_special_cases() {
        let y = Matrix::standard_normal(3, 20, &mut rng(2));
        let w = train_downstream_head(&Matrix::identity(3), &y, &y, RidgeParam::default()).unwrap();
        assert!(w.max_abs_diff(&Matrix::identity(3)) <= 1e-8);
        let w = train_downstream_head(&Matrix::identity(3), &y, &Matrix::zeros(3, 20), RidgeParam::default()).unwrap();
        assert_eq!(w.max_abs(), 0.0);
        // Two scalar samples: w = Σ f·y / Σ f² = (1·2 + 3·5) / (1 + 9).
        let f = Matrix::from_rows(&[[1.0, 3.0]]);
        let y = Matrix::from_rows(&[[2.0, 5.0]]);
        let w = train_downstream_head(&Matrix::identity(1), &f, &y, RidgeParam::ZERO).unwrap();
        assert!((w[(0, 0)] - 1.7).abs() <= 1e-12);
    }

    #[test]
    fn perfect_predictor_has_zero_mse() {
        let x = Matrix::standard_normal(4, 30, &mut rng(3));
        let test = Dataset::new(x.clone(), None, Some(x)).unwrap();
        let mse = evaluate_mse(&Matrix::identity(4), &Matrix::identity(4), None, &test).unwrap();
        assert_eq!(mse, 0.0);
    }

    #[test]
    fn standard_ssl_is_reproducible_and_beats_zero() {
        let cfg = small().standard();
        let a = run_standard_ssl(&cfg, &mut rng(4)).unwrap();
        let b = run_standard_ssl(&cfg, &mut rng(4)).unwrap();
        assert_eq!(a.test_mse, b.test_mse);
        // Zero predictor MSE is about dy = 2.
        assert!(a.test_mse < 1.0, "{}", a.test_mse);
        assert!(a.diagnostics.is_some());
    }

    #[test]
    fn zero_test_samples_is_an_input_error() {
        let cfg = PipelineConfig { nt: 0, ..small().standard() };
        assert!(matches!(run_standard_ssl(&cfg, &mut rng(5)), Err(Error::Input(_))));
    }

    #[test]
    fn processor_pipeline_runs_and_reports() {
        let cfg = small();
        let res = run_processor_ssl(&cfg, &mut rng(6)).unwrap();
        assert!(res.test_mse.is_finite() && res.test_mse >= 0.0);
        assert_eq!(res.n0, 20);
        assert_eq!(res.representation.shape(), (8, 2));
        assert_eq!(res.head.shape(), (2, 8));
        assert!(res.trace.is_some());
        let again = run_processor_ssl(&cfg, &mut rng(6)).unwrap();
        assert_eq!(res.test_mse, again.test_mse);
    }

    #[test]
    fn identity_processor_matches_standard_ssl() {
        let mut cfg = small();
        cfg.extra_down1 = true;
        cfg.processor = Some(ProcessorSetup {
            shape: ProcessorShape::Linear { input: 12, output: 12 },
            init: ProcessorInit::Prefix,
            frozen: true,
        });
        let with = run_processor_ssl(&cfg, &mut rng(7)).unwrap();
        let without = run_standard_ssl(&cfg.standard(), &mut rng(7)).unwrap();
        assert_eq!(with.test_mse.to_bits(), without.test_mse.to_bits());
    }

    #[test]
    fn sigma_linear_pipeline_accepts_small_downstream() {
        let mut cfg = small();
        cfg.distribution = DistributionSpec::SigmaLinear(SigmaLinearSpec { dx: 12, dz: 8, dy: 2, sigma: 2.0, noise_z: 0.0 });
        cfg.n2 = 6;
        cfg.split = SplitConfig::fixed(3);
        let res = run_processor_ssl(&cfg, &mut rng(8)).unwrap();
        assert!(res.test_mse.is_finite());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small();
        cfg.n2 = 20;
        assert!(cfg.validate().is_err());
        cfg.extra_down1 = true;
        assert!(cfg.validate().is_ok());
        cfg.processor = Some(ProcessorSetup::linear(11, 2));
        assert!(cfg.validate().is_err());
    }
}
