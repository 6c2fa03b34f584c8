use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cilab::diagnostics::{capacity_probe, CapacityProbeSpec};
use cilab::harness::{self, run_and_emit};
use cilab::models::{load_checkpoint, save_checkpoint};
use cilab::pipeline::run_pipeline;
use cilab::synthdata::{export_csv, import_csv, sample_prefix_gaussian, sample_sigma_linear};
use cilab::{CriteriaReport, PipelineConfig, PrefixGaussianSpec, RidgeParam, SigmaLinearSpec};

#[derive(Parser)]
#[command(name = "cilab", version, about = "Processor-augmented self-supervised learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Prefix,
    SigmaLinear,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Linear,
    Tanh,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset and write X.csv, Z.csv, Y.csv and a manifest.
    Gen {
        #[arg(long, value_enum, default_value = "prefix")]
        family: FamilyArg,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise scale of the sigma-linear family.
        #[arg(long, default_value_t = 2.0)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sweep and write records, summaries, a plot and a manifest.
    Sweep {
        /// Built-in sweep: n0, n0-small, lambda, df, width.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the standard-SSL baseline.
        #[arg(long)]
        no_baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the criteria of a saved processor on a dataset directory.
    Diagnose {
        #[arg(long)]
        processor: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Estimate how often a function class interpolates random labels.
    Capacity {
        #[arg(long, value_enum, default_value = "tanh")]
        class: ClassArg,
        #[arg(long, default_value_t = 8)]
        d: usize,
        /// Hidden width of the tanh class.
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 50_000)]
        budget: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One run of standard and processor SSL at the reference settings.
    Demo {
        #[arg(long, default_value_t = 30)]
        n0: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Save the trained processor here.
        #[arg(long)]
        save_processor: Option<PathBuf>,
        /// Write the training trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { family, n, seed, sigma, out } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = match family {
                FamilyArg::Prefix => sample_prefix_gaussian(&PrefixGaussianSpec::reference(), n, seed, &mut rng)?,
                FamilyArg::SigmaLinear => sample_sigma_linear(&SigmaLinearSpec::reference(sigma), n, seed, &mut rng)?,
            };
            export_csv(&data, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Sweep { preset, config, repeats, seed, no_baseline, out } => {
            let mut spec = match (preset, config) {
                (_, Some(path)) => harness::load_config(&path).with_context(|| format!("reading {}", path.display()))?,
                (Some(name), None) => harness::preset_by_name(&name)?,
                (None, None) => bail!("pass --preset or --config"),
            };
            if let Some(r) = repeats {
                spec.repeats = r;
            }
            if let Some(s) = seed {
                spec.base_seed = s;
            }
            if no_baseline {
                spec.baseline = false;
            }
            let output = run_and_emit(&spec, &out)?;
            println!("{}", harness::SUMMARY_HEADER);
            for row in &output.manifest.summary {
                println!("{}", harness::summary_line(row));
            }
            if output.manifest.diverged_runs > 0 {
                eprintln!("{} run(s) diverged", output.manifest.diverged_runs);
            }
            println!("results in {}", out.display());
        }
        Command::Diagnose { processor, data } => {
            let f = load_checkpoint(&processor)?;
            let data = import_csv(&data)?;
            let r = CriteriaReport::evaluate(&f, &data, RidgeParam::default())?;
            println!("samples      {}", r.samples);
            println!("c1_residual  {:.6e}", r.c1_residual);
            println!("c2_gap       {:.6e}", r.c2_gap);
            println!("pretext_fit  {:.6e}", r.pretext_fit);
        }
        Command::Capacity { class, d, k, n, trials, budget, tol, seed } => {
            let mut spec = match class {
                ClassArg::Linear => CapacityProbeSpec::linear(d, n, trials, tol),
                ClassArg::Tanh => CapacityProbeSpec::two_layer_tanh(d, k, n, trials, budget, tol),
            };
            spec.seed = seed;
            let report = capacity_probe(&spec)?;
            println!("success_rate {:.4}", report.success_rate);
            let worst = report.residuals.iter().cloned().fold(0.0, f64::max);
            println!("worst_residual {worst:.3e}");
        }
        Command::Demo { n0, seed, save_processor, trace } => {
            let cfg = PipelineConfig::reference(n0);
            let base = run_pipeline(&cfg.standard(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            let ours = run_pipeline(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
            println!("standard  test_mse {:.6}", base.test_mse);
            println!("processor test_mse {:.6}", ours.test_mse);
            if let Some(d) = ours.diagnostics {
                println!("processor c1 {:.4e}  c2 {:.4e}", d.c1_residual, d.c2_gap);
            }
            if let (Some(path), Some(f)) = (save_processor, ours.processor.as_ref()) {
                save_checkpoint(f, &path)?;
                println!("processor saved to {}", path.display());
            }
            if let (Some(path), Some(t)) = (trace, ours.trace.as_ref()) {
                t.save_csv(&path)?;
                println!("trace saved to {}", path.display());
            }
        }
    }
    Ok(())
}
