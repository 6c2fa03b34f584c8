//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::time::{Duration, Instant};

use cilab::diagnostics::{c1_residual, capacity_probe, moment_identity_check, CapacityProbeSpec};
use cilab::harness::{preset_df, preset_lambda, preset_n0, preset_width, run_sweep, summarize, SummaryRow};
use cilab::linalg::fit_linear_ls;
use cilab::losses::{empirical_composite_loss, general_loss_eval, t_statistic};
use cilab::models::init_processor;
use cilab::pipeline::{run_processor_ssl, run_standard_ssl};
use cilab::synthdata::sample_prefix_gaussian;
use cilab::trainer::{gradient_check, train_processor};
use cilab::{
    Activation, CriteriaReport, DistributionSpec, InitScale, LossSpec, Matrix, PipelineConfig, PrefixGaussianSpec,
    Processor, ProcessorInit, ProcessorSetup, ProcessorShape, RidgeParam, SigmaLinearSpec, SplitConfig, SweepSpec,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, u64);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sweep_means(mut spec: SweepSpec) -> Result<Vec<SummaryRow>, String> {
    spec.baseline = false;
    let records = run_sweep(&spec).map_err(|e| e.to_string())?;
    Ok(summarize(&records))
}

fn mean_at(rows: &[SummaryRow], value: f64) -> f64 {
    rows.iter().find(|r| r.value == value).map_or(f64::NAN, |r| r.mean_mse)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn a1() -> Outcome {
    let rows = sweep_means(preset_n0())?;
    let n0: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.mean_mse).collect();
    let rho = spearman(&n0, &means);
    let ratio = mean_at(&rows, 140.0) / mean_at(&rows, 30.0);
    check(rho <= -0.8 && ratio <= 0.5, format!("spearman {rho:.3}, mse(140)/mse(30) {ratio:.3}, means {means:.4?}"))
}

fn a2() -> Outcome {
    let rows = sweep_means(preset_lambda())?;
    let (lo, hi) = (mean_at(&rows, 0.1), mean_at(&rows, 1.5));
    check(hi >= 2.0 * lo, format!("mse(λ=1.5) {hi:.4} vs mse(λ=0.1) {lo:.4}"))
}

fn a3() -> Outcome {
    let rows = sweep_means(preset_df())?;
    let best = rows.iter().min_by(|a, b| a.mean_mse.total_cmp(&b.mean_mse)).unwrap();
    check(
        [4.0, 5.0, 6.0].contains(&best.value),
        format!("argmin df {} (mse {:.4})", best.value, best.mean_mse),
    )
}

fn a4() -> Outcome {
    let spec = SigmaLinearSpec::reference(2.0);
    let loss = LossSpec::squared(1.0).unwrap();
    let mut worst = (0.0f64, 0.0f64);
    let mut ok = true;
    for seed in 0..3 {
        let mut r = rng(seed);
        let model = spec.realize(&mut r).map_err(|e| e.to_string())?;
        let (pre, w) = model.sample_whitening(20_000, seed, &mut r).map_err(|e| e.to_string())?;
        let down1 = model.sample_with_whitener(5000, &w, seed, &mut r).map_err(|e| e.to_string())?;
        let f0 = init_processor(&ProcessorShape::Linear { input: 100, output: 5 }, InitScale::FanIn, &mut r).unwrap();
        let (f, _) = train_processor(&f0, &pre, &down1, &loss, &TrainConfig::default()).map_err(|e| e.to_string())?;
        let eval = model.sample_with_whitener(100_000, &w, seed, &mut r).map_err(|e| e.to_string())?;
        let rep = CriteriaReport::evaluate(&f, &eval, RidgeParam::default()).map_err(|e| e.to_string())?;
        let yy = eval.y().unwrap().frobenius_norm_sq() / eval.len() as f64;
        let c2_rel = rep.c2_gap / yy;
        ok &= rep.c1_residual <= 0.05 && c2_rel <= 0.10;
        worst = (worst.0.max(rep.c1_residual), worst.1.max(c2_rel));
    }
    check(ok, format!("3 seeds, worst c1 {:.2e}, worst c2/E|y|² {:.2e}", worst.0, worst.1))
}

fn a5_config(n0: usize) -> PipelineConfig {
    PipelineConfig {
        distribution: DistributionSpec::SigmaLinear(SigmaLinearSpec::reference(2.0)),
        n1: 20_000,
        n2: 2000,
        nt: 2000,
        split: SplitConfig::fixed(n0),
        loss: LossSpec::squared(1.0).unwrap(),
        train: TrainConfig::default(),
        processor: Some(ProcessorSetup::linear(100, 40)),
        extra_down1: true,
        ridge: RidgeParam::default(),
    }
}

fn a5() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let small = run_processor_ssl(&a5_config(10), &mut rng(seed)).map_err(|e| e.to_string())?;
        let large = run_processor_ssl(&a5_config(1000), &mut rng(seed)).map_err(|e| e.to_string())?;
        let down = small.trace.as_ref().and_then(|t| t.final_loss).map_or(f64::NAN, |l| l.downstream_term);
        ok &= down <= 1e-8 && small.test_mse >= 2.0 * large.test_mse;
        lines.push(format!("mse {:.3} vs {:.2e}, down {:.1e}", small.test_mse, large.test_mse, down));
    }
    check(ok, lines.join("; "))
}

fn a6() -> Outcome {
    let run = |s: CapacityProbeSpec| capacity_probe(&s).map(|r| r.success_rate).map_err(|e| e.to_string());
    let fits = run(CapacityProbeSpec::linear(30, 30, 20, 1e-8))?;
    let fails = run(CapacityProbeSpec::linear(30, 40, 20, 1e-3))?;
    let tanh = run(CapacityProbeSpec::two_layer_tanh(8, 64, 16, 20, 50_000, 1e-6))?;
    check(
        fits == 1.0 && fails == 0.0 && tanh >= 0.8,
        format!("linear n=30 {fits}, linear n=40 {fails}, tanh k=64 n=16 {tanh}"),
    )
}

fn a7() -> Outcome {
    let spec = PrefixGaussianSpec { dx: 6, dz: 4, dy: 2, noise_z: 0.3, noise_y: 0.3 };
    let (mut lin, mut mlp) = (0.0f64, 0.0f64);
    for i in 0..10u64 {
        let mut r = rng(700 + i);
        let pre = sample_prefix_gaussian(&spec, 40, i, &mut r).unwrap();
        let down = sample_prefix_gaussian(&spec, 25, i, &mut r).unwrap();
        let loss = LossSpec::squared(r.random_range(0.05..1.5)).unwrap();
        let f = init_processor(&ProcessorShape::Linear { input: 6, output: 3 }, InitScale::FanIn, &mut r).unwrap();
        lin = lin.max(gradient_check(&f, &pre, &down, &loss, RidgeParam::ZERO).map_err(|e| e.to_string())?);
        let shape = ProcessorShape::Mlp { widths: vec![6, 5, 3], activation: Activation::Tanh };
        let f = init_processor(&shape, InitScale::FanIn, &mut r).unwrap();
        mlp = mlp.max(gradient_check(&f, &pre, &down, &loss, RidgeParam::ZERO).map_err(|e| e.to_string())?);
    }
    check(lin <= 1e-5 && mlp <= 1e-4, format!("max rel err linear {lin:.2e}, tanh {mlp:.2e}"))
}

fn a8() -> Outcome {
    // Coordinates 80..85 are independent of both labels, so the population
    // partial covariance is zero.
    let weights = Matrix::from_fn(5, 100, |r, c| if c == 80 + r { 1.0 } else { 0.0 });
    let f = Processor::linear(weights);
    let spec = PrefixGaussianSpec::reference();
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for (k, n) in [100usize, 1000, 10_000, 100_000].into_iter().enumerate() {
        let mut total = 0.0;
        let reps = 8;
        for s in 0..reps {
            let data = sample_prefix_gaussian(&spec, n, s, &mut rng(800 + 10 * k as u64 + s)).unwrap();
            total += c1_residual(&f, &data, RidgeParam::default()).map_err(|e| e.to_string())?;
        }
        lx.push((n as f64).log10());
        ly.push((total / reps as f64).log10());
    }
    let mx = lx.iter().sum::<f64>() / 4.0;
    let my = ly.iter().sum::<f64>() / 4.0;
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    check((-0.7..=-0.3).contains(&slope), format!("log-log slope {slope:.3}"))
}

fn a9() -> Outcome {
    let mut r = rng(900);
    let (mut worst_id, mut min_t) = (0.0f64, f64::INFINITY);
    for i in 0..100u64 {
        let sigma = r.random_range(0.5..3.0);
        let lambda = r.random_range(0.05..2.0);
        let spec = SigmaLinearSpec { dx: 30, dz: 20, dy: 4, sigma, noise_z: 0.0 };
        let data = spec.realize(&mut r).and_then(|m| m.sample(400, i, &mut r)).map_err(|e| e.to_string())?;
        let df = r.random_range(1..=12);
        let shape = if i % 2 == 0 {
            ProcessorShape::Linear { input: 30, output: df }
        } else {
            ProcessorShape::Mlp { widths: vec![30, 16, df], activation: Activation::Tanh }
        };
        let f = init_processor(&shape, InitScale::FanIn, &mut r).unwrap();
        let ridge = RidgeParam::ZERO;
        worst_id = worst_id.max(moment_identity_check(&f, &data, lambda, ridge).map_err(|e| e.to_string())?);
        min_t = min_t.min(t_statistic(&f, &data, ridge).map_err(|e| e.to_string())?);
    }
    check(worst_id <= 1e-8 && min_t >= -1e-10, format!("worst identity residual {worst_id:.2e}, min T {min_t:.3e}"))
}

fn a10() -> Outcome {
    let rows = sweep_means(preset_width())?;
    let (base, double) = (mean_at(&rows, 16.0), mean_at(&rows, 32.0));
    check(double >= base, format!("mean mse width 16 {base:.4}, width 32 {double:.4}"))
}

/// Plain gradient descent on `(1/n)‖T − W·F‖²` with step `1/L`.
fn least_squares_by_descent(f: &Matrix, t: &Matrix) -> Matrix {
    let n = f.cols() as f64;
    let gram = f.matmul_nt(f).scale(1.0 / n);
    let lipschitz = cilab::linalg::symmetric_eigenvalues(&gram).into_iter().fold(0.0, f64::max);
    let cross = t.matmul_nt(f).scale(1.0 / n);
    let mut w = Matrix::zeros(t.rows(), f.rows());
    for _ in 0..20_000 {
        let mut grad = w.matmul(&gram);
        grad.axpy(-1.0, &cross);
        w.axpy(-1.0 / lipschitz, &grad);
    }
    w
}

fn a11() -> Outcome {
    let mut r = rng(1100);
    let f = Matrix::standard_normal(6, 80, &mut r);
    let t = Matrix::standard_normal(3, 80, &mut r);
    let exact = fit_linear_ls(&f, &t, RidgeParam::ZERO).map_err(|e| e.to_string())?;
    let ls_gap = exact.max_abs_diff(&least_squares_by_descent(&f, &t));

    let data = sample_prefix_gaussian(&PrefixGaussianSpec::reference(), 500, 0, &mut r).unwrap();
    let proc = init_processor(&ProcessorShape::Linear { input: 100, output: 8 }, InitScale::FanIn, &mut r).unwrap();
    let general = LossSpec::general_from_tags(0.7, "square", "square", "euclidean", "euclidean").unwrap();
    let a = general_loss_eval(&proc, &data, &general, RidgeParam::default()).map_err(|e| e.to_string())?;
    let b = empirical_composite_loss(&proc, &data, &data, &LossSpec::squared(0.7).unwrap(), RidgeParam::default())
        .map_err(|e| e.to_string())?;
    let loss_gap = (a.total - b.total)
        .abs()
        .max((a.downstream_term - b.downstream_term).abs())
        .max((a.pretext_term - b.pretext_term).abs());

    let mut cfg = PipelineConfig::reference(30);
    cfg.processor = Some(ProcessorSetup {
        shape: ProcessorShape::Linear { input: 100, output: 100 },
        init: ProcessorInit::Prefix,
        frozen: true,
    });
    cfg.extra_down1 = true;
    let mut identical = true;
    for seed in 0..3 {
        let ours = run_processor_ssl(&cfg, &mut rng(seed)).map_err(|e| e.to_string())?;
        let std = run_standard_ssl(&cfg.standard(), &mut rng(seed)).map_err(|e| e.to_string())?;
        identical &= ours.test_mse.to_bits() == std.test_mse.to_bits() && ours.head == std.head;
    }
    check(
        ls_gap <= 1e-6 && loss_gap <= 1e-10 && identical,
        format!("ls vs descent {ls_gap:.1e}, general vs composite {loss_gap:.1e}, identity bit-exact {identical}"),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("A1", a1, 600),
        ("A2", a2, 300),
        ("A3", a3, 600),
        ("A4", a4, 120),
        ("A5", a5, 180),
        ("A6", a6, 300),
        ("A7", a7, 60),
        ("A8", a8, 60),
        ("A9", a9, 60),
        ("A10", a10, 600),
        ("A11", a11, 60),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let mut failed = 0;
    for (name, run, limit) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == name) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(limit);
        let (ok, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{name:<4} {verdict}  {detail}  [{:.1}s of {limit}s]", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
