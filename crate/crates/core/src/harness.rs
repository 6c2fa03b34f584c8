//! Sweep orchestration, aggregation, CSV/SVG output, config files and run
//! manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::splitmix64;
use crate::error::{Error, Result};
use crate::linalg::RidgeParam;
use crate::losses::LossSpec;
use crate::models::{Activation, InitScale, ProcessorShape};
use crate::pipeline::{run_pipeline, DistributionSpec, PipelineConfig, ProcessorInit, ProcessorSetup, DEFAULT_TEST_SAMPLES};
use crate::synthdata::{PrefixGaussianSpec, SigmaLinearSpec, SplitConfig};
use crate::trainer::HeadMode;

/// Normal-approximation multiplier for the 95% band.
pub const CI_Z: f64 = 1.96;

/// Environment variable capping the sweep worker count.
pub const THREADS_ENV: &str = "CILAB_THREADS";

pub const RECORDS_HEADER: &str =
    "run_id,sweep_var,value,repeat,seed,mse_test,c1_residual,c2_gap,train_total,train_down,train_pre,wallclock_ms";
pub const SUMMARY_HEADER: &str = "value,mean_mse,std_mse,ci_low,ci_high,repeats";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVariable {
    N0,
    Lambda,
    Df,
    Width,
    N2,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::N0 => "n0",
            SweepVariable::Lambda => "lambda",
            SweepVariable::Df => "df",
            SweepVariable::Width => "width",
            SweepVariable::N2 => "n2",
        }
    }
}

impl FromStr for SweepVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "n0" => SweepVariable::N0,
            "lambda" => SweepVariable::Lambda,
            "df" => SweepVariable::Df,
            "width" => SweepVariable::Width,
            "n2" => SweepVariable::N2,
            other => return Err(Error::config(format!("unknown sweep variable '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: PipelineConfig,
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub repeats: usize,
    pub base_seed: u64,
    /// Also run standard SSL at every point.
    pub baseline: bool,
}

fn as_count(value: f64, what: &str) -> Result<usize> {
    if value >= 1.0 && value.fract() == 0.0 && value.is_finite() {
        Ok(value as usize)
    } else {
        Err(Error::config(format!("{what} must be a positive integer, got {value}")))
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("sweep needs at least one value"));
        }
        let up = self.values.windows(2).all(|w| w[0] < w[1]);
        let down = self.values.windows(2).all(|w| w[0] > w[1]);
        if !(up || down) {
            return Err(Error::config("sweep values must be strictly monotone"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats must be >= 1"));
        }
        for &v in &self.values {
            self.config_at(v)?.validate()?;
        }
        Ok(())
    }

    /// The pipeline config at one sweep value. Processor-only variables leave
    /// a processor-free base untouched.
    pub fn config_at(&self, value: f64) -> Result<PipelineConfig> {
        apply_value(&self.base, self.variable, value)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("sweep spec serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    /// The same sweep on standard SSL.
    pub fn baseline_spec(&self) -> SweepSpec {
        SweepSpec { base: self.base.standard(), baseline: false, ..self.clone() }
    }
}

pub fn apply_value(base: &PipelineConfig, var: SweepVariable, value: f64) -> Result<PipelineConfig> {
    let mut cfg = base.clone();
    match var {
        SweepVariable::N0 => {
            let n0 = as_count(value, "n0")?;
            cfg.split.n0 = n0;
            if let Some(alpha) = cfg.split.alpha {
                cfg.n2 = (n0 as f64 / alpha).round() as usize;
            }
        }
        SweepVariable::N2 => {
            cfg.n2 = as_count(value, "n2")?;
            if let Some(alpha) = cfg.split.alpha {
                cfg.split = SplitConfig::from_alpha(alpha, cfg.n2)?;
            }
        }
        SweepVariable::Lambda => cfg.loss.lambda = value,
        SweepVariable::Df => {
            let df = as_count(value, "df")?;
            if let Some(p) = cfg.processor.as_mut() {
                p.shape = p.shape.with_output_dim(df);
            }
        }
        SweepVariable::Width => {
            let width = as_count(value, "width")?;
            if let Some(p) = cfg.processor.as_mut() {
                match &mut p.shape {
                    ProcessorShape::Mlp { widths, .. } => {
                        let last = widths.len() - 1;
                        for w in &mut widths[1..last] {
                            *w = width;
                        }
                    }
                    ProcessorShape::Linear { .. } => {
                        return Err(Error::config("width sweeps need an MLP processor"));
                    }
                }
            }
        }
    }
    Ok(cfg)
}

/// `base_seed ⊕ mix(value, repeat)`; depends on nothing else.
pub fn run_seed(base_seed: u64, value: f64, repeat: usize) -> u64 {
    base_seed ^ splitmix64(value.to_bits() ^ splitmix64(repeat as u64))
}

pub fn run_id(spec_digest: &str, value: f64, repeat: usize) -> String {
    let mut h = Sha256::new();
    h.update(spec_digest.as_bytes());
    h.update(value.to_bits().to_le_bytes());
    h.update((repeat as u64).to_le_bytes());
    hex(&h.finalize()[..8])
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub sweep_var: String,
    pub value: f64,
    pub repeat: usize,
    pub seed: u64,
    /// Absent when training diverged.
    pub mse_test: Option<f64>,
    pub c1_residual: Option<f64>,
    pub c2_gap: Option<f64>,
    pub train_total: Option<f64>,
    pub train_down: Option<f64>,
    pub train_pre: Option<f64>,
    pub wallclock_ms: f64,
    pub diverged: bool,
}

/// Worker count: `CILAB_THREADS` when set to a positive integer, otherwise
/// the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_one(spec: &SweepSpec, digest: &str, value: f64, repeat: usize) -> Result<RunRecord> {
    let cfg = spec.config_at(value)?;
    let seed = run_seed(spec.base_seed, value, repeat);
    let start = Instant::now();
    let outcome = run_pipeline(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    let wallclock_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut rec = RunRecord {
        run_id: run_id(digest, value, repeat),
        sweep_var: spec.variable.name().to_string(),
        value,
        repeat,
        seed,
        mse_test: None,
        c1_residual: None,
        c2_gap: None,
        train_total: None,
        train_down: None,
        train_pre: None,
        wallclock_ms,
        diverged: false,
    };
    match outcome {
        Ok(res) => {
            rec.mse_test = Some(res.test_mse);
            if let Some(d) = res.diagnostics {
                rec.c1_residual = Some(d.c1_residual);
                rec.c2_gap = Some(d.c2_gap);
            }
            if let Some(l) = res.trace.and_then(|t| t.final_loss) {
                rec.train_total = Some(l.total);
                rec.train_down = Some(l.downstream_term);
                rec.train_pre = Some(l.pretext_term);
            }
        }
        Err(Error::Divergence { .. }) => rec.diverged = true,
        Err(e) => return Err(e),
    }
    Ok(rec)
}

/// One pipeline run per (value, repeat) on a pool of [`worker_count`]
/// threads. Records come back ordered by value, then repeat.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let digest = spec.digest();
    let jobs: Vec<(f64, usize)> =
        spec.values.iter().flat_map(|&v| (0..spec.repeats).map(move |r| (v, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let records = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, r)| run_one(spec, &digest, v, r))
            .collect::<Result<Vec<_>>>()
    })?;
    for &v in &spec.values {
        if records.iter().filter(|r| r.value == v).all(|r| r.diverged) {
            return Err(Error::Sweep { value: v });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub value: f64,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Runs that produced an MSE.
    pub repeats: usize,
}

/// Mean, sample standard deviation and `mean ± 1.96·std/√k` per value, in
/// order of first appearance. Diverged runs are skipped.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<f64> = Vec::new();
    let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in records {
        if !order.iter().any(|v| v.to_bits() == r.value.to_bits()) {
            order.push(r.value);
        }
        if let Some(m) = r.mse_test {
            groups.entry(r.value.to_bits()).or_default().push(m);
        }
    }
    order
        .into_iter()
        .filter_map(|v| {
            let mut xs = groups.remove(&v.to_bits())?;
            // Sorting makes the sums independent of record order.
            xs.sort_by(f64::total_cmp);
            Some(summary_row(v, &xs))
        })
        .collect()
}

fn summary_row(value: f64, xs: &[f64]) -> SummaryRow {
    let k = xs.len();
    let mean = xs.iter().sum::<f64>() / k as f64;
    let std = if k > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    let half = CI_Z * std / (k as f64).sqrt();
    SummaryRow { value, mean_mse: mean, std_mse: std, ci_low: mean - half, ci_high: mean + half, repeats: k }
}

/// Decimal notation with 12 significant digits; no exponent.
pub fn format_decimal(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".to_string() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (11 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // The rounding can carry into a new leading digit (9.99… → 10.0…).
    let digits = s.chars().filter(char::is_ascii_digit).skip_while(|c| *c == '0').count();
    if digits > 12 && decimals > 0 {
        format!("{x:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(format_decimal).unwrap_or_default()
}

pub fn record_line(r: &RunRecord) -> String {
    [
        r.run_id.clone(),
        r.sweep_var.clone(),
        format_decimal(r.value),
        r.repeat.to_string(),
        r.seed.to_string(),
        opt(r.mse_test),
        opt(r.c1_residual),
        opt(r.c2_gap),
        opt(r.train_total),
        opt(r.train_down),
        opt(r.train_pre),
        format_decimal(r.wallclock_ms),
    ]
    .join(",")
}

pub fn summary_line(s: &SummaryRow) -> String {
    [
        format_decimal(s.value),
        format_decimal(s.mean_mse),
        format_decimal(s.std_mse),
        format_decimal(s.ci_low),
        format_decimal(s.ci_high),
        s.repeats.to_string(),
    ]
    .join(",")
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn emit_records_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    write_lines(path, RECORDS_HEADER, records.iter().map(record_line))
}

pub fn emit_summary_csv(summary: &[SummaryRow], path: &Path) -> Result<()> {
    write_lines(path, SUMMARY_HEADER, summary.iter().map(summary_line))
}

fn parse_opt(field: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| Error::Parse(format!("bad number '{field}'")))
}

fn parse_num<T: FromStr>(field: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Parse(format!("bad number '{field}'")))
}

/// Reads a records file written by [`emit_records_csv`].
pub fn read_records_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RECORDS_HEADER {
        return Err(Error::Parse("unexpected records header".into()));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i: usize| row.get(i).unwrap_or("");
        let mse_test = parse_opt(f(5))?;
        out.push(RunRecord {
            run_id: f(0).to_string(),
            sweep_var: f(1).to_string(),
            value: parse_num(f(2))?,
            repeat: parse_num(f(3))?,
            seed: parse_num(f(4))?,
            mse_test,
            c1_residual: parse_opt(f(6))?,
            c2_gap: parse_opt(f(7))?,
            train_total: parse_opt(f(8))?,
            train_down: parse_opt(f(9))?,
            train_pre: parse_opt(f(10))?,
            wallclock_ms: parse_num(f(11))?,
            diverged: mse_test.is_none(),
        });
    }
    Ok(out)
}

/// Plot geometry shared by the renderer and its tests.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotGeometry {
    pub mean: Vec<(f64, f64)>,
    /// Upper edge left to right, then lower edge right to left.
    pub band: Vec<(f64, f64)>,
    pub baseline: Option<Vec<(f64, f64)>>,
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 400.0;
const MARGIN: f64 = 56.0;

pub fn plot_geometry(summary: &[SummaryRow], baseline: Option<&[SummaryRow]>) -> Result<PlotGeometry> {
    if summary.len() < 2 {
        return Err(Error::input("a plot needs at least two summary rows"));
    }
    let all = summary.iter().chain(baseline.into_iter().flatten());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in all {
        x0 = x0.min(r.value);
        x1 = x1.max(r.value);
        y0 = y0.min(r.ci_low).min(r.mean_mse);
        y1 = y1.max(r.ci_high).max(r.mean_mse);
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (PLOT_W - 2.0 * MARGIN);
    let sy = |y: f64| PLOT_H - MARGIN - (y - y0) / (y1 - y0) * (PLOT_H - 2.0 * MARGIN);
    let line = |rows: &[SummaryRow]| rows.iter().map(|r| (sx(r.value), sy(r.mean_mse))).collect::<Vec<_>>();
    let mut band: Vec<(f64, f64)> = summary.iter().map(|r| (sx(r.value), sy(r.ci_high))).collect();
    band.extend(summary.iter().rev().map(|r| (sx(r.value), sy(r.ci_low))));
    Ok(PlotGeometry { mean: line(summary), band, baseline: baseline.map(line) })
}

fn points(ps: &[(f64, f64)]) -> String {
    ps.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect::<Vec<_>>().join(" ")
}

/// Self-contained SVG: mean polyline over its shaded 95% band, plus an
/// optional dashed baseline series.
pub fn render_plot(summary: &[SummaryRow], baseline: Option<&[SummaryRow]>, x_label: &str) -> Result<String> {
    let g = plot_geometry(summary, baseline)?;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_W}" height="{PLOT_H}" viewBox="0 0 {PLOT_W} {PLOT_H}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{PLOT_W}" height="{PLOT_H}" fill="white"/>"#).unwrap();
    let (l, r, t, b) = (MARGIN, PLOT_W - MARGIN, MARGIN, PLOT_H - MARGIN);
    writeln!(s, r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<polygon points="{}" fill="steelblue" fill-opacity="0.25" stroke="none"/>"#, points(&g.band))
        .unwrap();
    writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, points(&g.mean))
        .unwrap();
    if let Some(base) = &g.baseline {
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="darkorange" stroke-width="2" stroke-dasharray="6 4"/>"#,
            points(base)
        )
        .unwrap();
    }
    let first = summary.first().unwrap().value;
    let last = summary.last().unwrap().value;
    writeln!(s, r#"<text x="{l}" y="{}" font-size="12">{}</text>"#, b + 18.0, format_decimal(first)).unwrap();
    writeln!(s, r#"<text x="{r}" y="{}" font-size="12" text-anchor="end">{}</text>"#, b + 18.0, format_decimal(last))
        .unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{x_label}</text>"#, PLOT_W / 2.0, b + 36.0)
        .unwrap();
    writeln!(s, r#"<text x="14" y="{}" font-size="13" transform="rotate(-90 14 {})">test MSE</text>"#, PLOT_H / 2.0, PLOT_H / 2.0)
        .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_plot(summary: &[SummaryRow], baseline: Option<&[SummaryRow]>, x_label: &str, path: &Path) -> Result<()> {
    fs::write(path, render_plot(summary, baseline, x_label)?)?;
    Ok(())
}

// --- presets ---------------------------------------------------------------

pub const DEFAULT_REPEATS: usize = 5;

fn preset(base: PipelineConfig, variable: SweepVariable, values: Vec<f64>) -> SweepSpec {
    SweepSpec { base, variable, values, repeats: DEFAULT_REPEATS, base_seed: 0, baseline: true }
}

/// n0 from 30 to 140.
pub fn preset_n0() -> SweepSpec {
    preset(PipelineConfig::reference(30), SweepVariable::N0, vec![30.0, 50.0, 70.0, 90.0, 110.0, 140.0])
}

/// n0 from 15 to 70.
pub fn preset_n0_small() -> SweepSpec {
    preset(PipelineConfig::reference(15), SweepVariable::N0, vec![15.0, 30.0, 40.0, 50.0, 60.0, 70.0])
}

/// λ from 0.1 to 1.5 at n0 = 15.
pub fn preset_lambda() -> SweepSpec {
    preset(PipelineConfig::reference(15), SweepVariable::Lambda, vec![0.1, 0.5, 1.0, 1.5])
}

/// Processor width df from 1 to 12 at n0 = 15.
pub fn preset_df() -> SweepSpec {
    let mut s = preset(PipelineConfig::reference(15), SweepVariable::Df, (1..=12).map(f64::from).collect());
    s.baseline = false;
    s
}

/// Hidden width of a prefix-initialized relu processor at n0 = 15.
pub fn preset_width() -> SweepSpec {
    let mut base = PipelineConfig::reference(15);
    base.n1 = 2000;
    base.train.outer_steps = 1000;
    base.processor = Some(ProcessorSetup::prefix(ProcessorShape::Mlp {
        widths: vec![100, 16, 5],
        activation: Activation::Relu,
    }));
    let mut s = preset(base, SweepVariable::Width, vec![16.0, 32.0]);
    s.baseline = false;
    s
}

pub fn preset_by_name(name: &str) -> Result<SweepSpec> {
    match name {
        "n0" => Ok(preset_n0()),
        "n0-small" => Ok(preset_n0_small()),
        "lambda" => Ok(preset_lambda()),
        "df" => Ok(preset_df()),
        "width" => Ok(preset_width()),
        other => Err(Error::config(format!("unknown preset '{other}' (n0, n0-small, lambda, df, width)"))),
    }
}

// --- config files ------------------------------------------------------------

/// Keys accepted by [`parse_config`].
pub const CONFIG_KEYS: &[&str] = &[
    "preset", "family", "dx", "dz", "dy", "noise_z", "noise_y", "sigma", "n1", "n2", "nt", "n0", "alpha",
    "extra_down1", "lambda", "processor", "df", "hidden", "activation", "init", "frozen", "outer_steps",
    "learning_rate", "head_mode", "inner_steps", "inner_lr", "convergence_tol", "ridge", "sweep", "values",
    "repeats", "seed", "baseline",
];

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Parse(format!("expected a boolean, got '{v}'"))),
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| Error::Parse(format!("bad list entry '{s}'"))))
        .collect()
}

/// Flat `key = value` lines; `#` starts a comment. Unknown or repeated keys
/// are errors.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected 'key = value'", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !CONFIG_KEYS.contains(&k) {
            return Err(Error::Parse(format!("line {}: unknown key '{k}'", no + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Parse(format!("line {}: duplicate key '{k}'", no + 1)));
        }
    }
    Ok(map)
}

/// Builds a sweep from a config file. Settings start from `preset` (default
/// `n0`) and every other key overrides one field.
pub fn parse_config(text: &str) -> Result<SweepSpec> {
    let kv = parse_key_values(text)?;
    let get = |k: &str| kv.get(k).map(String::as_str);
    let num = |k: &str| -> Result<Option<f64>> { get(k).map(parse_num::<f64>).transpose() };
    let count = |k: &str| -> Result<Option<usize>> { get(k).map(parse_num::<usize>).transpose() };

    let mut spec = preset_by_name(get("preset").unwrap_or("n0"))?;
    let base = &mut spec.base;

    let (mut dx, mut dz, mut dy) = base.distribution.dims();
    dx = count("dx")?.unwrap_or(dx);
    dz = count("dz")?.unwrap_or(dz);
    dy = count("dy")?.unwrap_or(dy);
    let family = get("family").unwrap_or(match base.distribution {
        DistributionSpec::PrefixGaussian(_) => "prefix",
        DistributionSpec::SigmaLinear(_) => "sigma_linear",
    });
    base.distribution = match family {
        "prefix" => {
            let reference = PrefixGaussianSpec::reference();
            DistributionSpec::PrefixGaussian(PrefixGaussianSpec {
                dx,
                dz,
                dy,
                noise_z: num("noise_z")?.unwrap_or(reference.noise_z),
                noise_y: num("noise_y")?.unwrap_or(reference.noise_y),
            })
        }
        "sigma_linear" => DistributionSpec::SigmaLinear(SigmaLinearSpec {
            dx,
            dz,
            dy,
            sigma: num("sigma")?.unwrap_or(2.0),
            noise_z: num("noise_z")?.unwrap_or(0.0),
        }),
        other => return Err(Error::Parse(format!("unknown family '{other}'"))),
    };

    base.n1 = count("n1")?.unwrap_or(base.n1);
    base.nt = count("nt")?.unwrap_or(base.nt);
    if let Some(alpha) = num("alpha")? {
        base.split.alpha = Some(alpha);
    }
    if let Some(n0) = count("n0")? {
        base.split.n0 = n0;
        if let Some(alpha) = base.split.alpha {
            base.n2 = (n0 as f64 / alpha).round() as usize;
        }
    }
    if let Some(n2) = count("n2")? {
        base.n2 = n2;
        base.split.alpha = None;
    }
    base.extra_down1 = get("extra_down1").map(parse_bool).transpose()?.unwrap_or(base.extra_down1);
    if let Some(lambda) = num("lambda")? {
        base.loss = LossSpec::squared(lambda)?;
    }

    let processor_kind = get("processor").map(str::to_string);
    let current_df = base.processor.as_ref().map_or(5, |p| p.shape.output_dim());
    let df = count("df")?.unwrap_or(current_df);
    let activation: Activation = get("activation").map(str::parse).transpose()?.unwrap_or(Activation::Relu);
    let init = match get("init") {
        None => base.processor.as_ref().map_or(ProcessorInit::Prefix, |p| p.init),
        Some("prefix") => ProcessorInit::Prefix,
        Some("random") => ProcessorInit::Random(InitScale::FanIn),
        Some(other) => return Err(Error::Parse(format!("unknown init '{other}'"))),
    };
    let frozen = get("frozen").map(parse_bool).transpose()?.unwrap_or(false);
    let shape = match processor_kind.as_deref() {
        Some("none") => None,
        Some("linear") => Some(ProcessorShape::Linear { input: dx, output: df }),
        Some("mlp") => {
            let hidden: Vec<usize> = get("hidden").map(parse_list).transpose()?.unwrap_or_else(|| vec![16]);
            let mut widths = vec![dx];
            widths.extend(hidden);
            widths.push(df);
            Some(ProcessorShape::Mlp { widths, activation })
        }
        Some(other) => return Err(Error::Parse(format!("unknown processor '{other}'"))),
        None => match base.processor.as_ref() {
            None => None,
            Some(p) => {
                let mut shape = p.shape.with_output_dim(df);
                match &mut shape {
                    ProcessorShape::Linear { input, .. } => *input = dx,
                    ProcessorShape::Mlp { widths, activation: act } => {
                        widths[0] = dx;
                        if let Some(h) = get("hidden") {
                            let mut w = vec![dx];
                            w.extend(parse_list::<usize>(h)?);
                            w.push(df);
                            *widths = w;
                        }
                        if get("activation").is_some() {
                            *act = activation;
                        }
                    }
                }
                Some(shape)
            }
        },
    };
    base.processor = shape.map(|shape| ProcessorSetup { shape, init, frozen });

    let t = &mut base.train;
    t.outer_steps = count("outer_steps")?.unwrap_or(t.outer_steps);
    t.learning_rate = num("learning_rate")?.unwrap_or(t.learning_rate);
    t.convergence_tol = num("convergence_tol")?.unwrap_or(t.convergence_tol);
    t.head_mode = match get("head_mode") {
        None => t.head_mode,
        Some("exact") => HeadMode::ExactRefit,
        Some("inner_gd") => {
            let HeadMode::InnerGd { steps, lr } = HeadMode::inner_gd_default() else { unreachable!() };
            HeadMode::InnerGd { steps: count("inner_steps")?.unwrap_or(steps), lr: num("inner_lr")?.unwrap_or(lr) }
        }
        Some(other) => return Err(Error::Parse(format!("unknown head_mode '{other}'"))),
    };
    if let Some(r) = num("ridge")? {
        let ridge = RidgeParam::relative(r)?;
        t.ridge = ridge;
        base.ridge = ridge;
    }

    if let Some(v) = get("sweep") {
        spec.variable = v.parse()?;
    }
    if let Some(v) = get("values") {
        spec.values = parse_list(v)?;
    }
    spec.repeats = count("repeats")?.unwrap_or(spec.repeats);
    spec.base_seed = get("seed").map(parse_num::<u64>).transpose()?.unwrap_or(spec.base_seed);
    spec.baseline = get("baseline").map(parse_bool).transpose()?.unwrap_or(spec.baseline && spec.base.processor.is_some());
    spec.validate()?;
    Ok(spec)
}

pub fn load_config(path: &Path) -> Result<SweepSpec> {
    parse_config(&fs::read_to_string(path)?)
}

// --- manifests ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub value: f64,
    pub repeat: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub library_version: String,
    pub spec_digest: String,
    pub spec: SweepSpec,
    pub test_samples_default: usize,
    pub seeds: Vec<SeedEntry>,
    pub summary: Vec<SummaryRow>,
    pub baseline_summary: Option<Vec<SummaryRow>>,
    pub diverged_runs: usize,
}

impl RunManifest {
    pub fn new(spec: &SweepSpec, records: &[RunRecord], baseline: Option<&[RunRecord]>) -> Self {
        Self {
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            spec_digest: spec.digest(),
            spec: spec.clone(),
            test_samples_default: DEFAULT_TEST_SAMPLES,
            seeds: records.iter().map(|r| SeedEntry { value: r.value, repeat: r.repeat, seed: r.seed }).collect(),
            summary: summarize(records),
            baseline_summary: baseline.map(summarize),
            diverged_runs: records.iter().filter(|r| r.diverged).count(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }
}

/// Files written by [`run_and_emit`].
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub records: Vec<RunRecord>,
    pub baseline: Option<Vec<RunRecord>>,
    pub manifest: RunManifest,
}

/// Runs the sweep (and its baseline when requested) and writes
/// `records.csv`, `summary.csv`, `baseline_summary.csv`, `plot.svg` and
/// `manifest.json` into `dir`.
pub fn run_and_emit(spec: &SweepSpec, dir: &Path) -> Result<SweepOutput> {
    fs::create_dir_all(dir)?;
    let records = run_sweep(spec)?;
    let baseline = if spec.baseline { Some(run_sweep(&spec.baseline_spec())?) } else { None };
    let manifest = RunManifest::new(spec, &records, baseline.as_deref());
    emit_records_csv(&records, &dir.join("records.csv"))?;
    emit_summary_csv(&manifest.summary, &dir.join("summary.csv"))?;
    if let Some(b) = &manifest.baseline_summary {
        emit_summary_csv(b, &dir.join("baseline_summary.csv"))?;
    }
    if manifest.summary.len() >= 2 {
        emit_plot(&manifest.summary, manifest.baseline_summary.as_deref(), spec.variable.name(), &dir.join("plot.svg"))?;
    }
    manifest.write(&dir.join("manifest.json"))?;
    Ok(SweepOutput { records, baseline, manifest })
}
