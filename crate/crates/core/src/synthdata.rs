//! Synthetic data families and the downstream split.
//!
//! Two families are provided:
//!
//! * [`PrefixGaussianSpec`]: `x ~ N(0, I)`, `z` and `y` are noisy copies of the
//!   first `dz` and `dy` coordinates of `x`.
//! * [`SigmaLinearSpec`]: `z` is the (empirically whitened) first `dz`
//!   coordinates of `x` and `y = B·z` exactly, where every singular value of
//!   `B` equals `sigma`.
//!
//! Every sample carries all three blocks. Pipelines use the blocks their
//! stage needs and ignore the rest.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inverse_sqrt_spd, random_orthogonal, second_moment, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefixGaussianSpec {
    pub dx: usize,
    pub dz: usize,
    pub dy: usize,
    pub noise_z: f64,
    pub noise_y: f64,
}

impl PrefixGaussianSpec {
    /// `dx = 100, dz = 80, dy = 5` with noise level 0.01 on both labels.
    pub fn reference() -> Self {
        Self { dx: 100, dz: 80, dy: 5, noise_z: 0.01, noise_y: 0.01 }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.dx, self.dz, self.dy)?;
        if !(self.noise_z >= 0.0 && self.noise_y >= 0.0) {
            return Err(Error::config("noise levels must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaLinearSpec {
    pub dx: usize,
    pub dz: usize,
    pub dy: usize,
    pub sigma: f64,
    pub noise_z: f64,
}

impl SigmaLinearSpec {
    pub fn reference(sigma: f64) -> Self {
        Self { dx: 100, dz: 80, dy: 5, sigma, noise_z: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.dx, self.dz, self.dy)?;
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma must be positive"));
        }
        if !(self.noise_z >= 0.0) {
            return Err(Error::config("noise_z must be >= 0"));
        }
        Ok(())
    }

    /// Draws `B = σ·U·[I | 0]·Vᵀ` with independent Haar `U` (dy×dy) and `V`
    /// (dz×dz).
    pub fn realize<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SigmaLinearModel> {
        self.validate()?;
        let u = random_orthogonal(self.dy, rng)?;
        let v = random_orthogonal(self.dz, rng)?;
        // U·[I | 0]·Vᵀ keeps the first dy columns of V.
        let v_head = Matrix::from_fn(self.dz, self.dy, |r, c| v[(r, c)]);
        let b = u.matmul_nt(&v_head).scale(self.sigma);
        Ok(SigmaLinearModel { spec: *self, b })
    }
}

fn check_dims(dx: usize, dz: usize, dy: usize) -> Result<()> {
    if !(dx >= dz && dz >= dy && dy >= 1) {
        return Err(Error::config(format!("need dx >= dz >= dy >= 1, got {dx}, {dz}, {dy}")));
    }
    Ok(())
}

/// A realized member of the σ-linear family: the spec plus the fixed `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaLinearModel {
    pub spec: SigmaLinearSpec,
    pub b: Matrix,
}

impl SigmaLinearModel {
    /// Samples `n` columns. `Z` is whitened on this very sample, so
    /// `Ê[zzᵀ] = I` holds to rounding, and `Y = B·Z` exactly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, seed: u64, rng: &mut R) -> Result<Dataset> {
        Ok(self.sample_whitening(n, seed, rng)?.0)
    }

    /// As [`sample`](Self::sample), also returning the whitening matrix so
    /// later, smaller samples can share it via
    /// [`sample_with_whitener`](Self::sample_with_whitener).
    pub fn sample_whitening<R: Rng + ?Sized>(&self, n: usize, seed: u64, rng: &mut R) -> Result<(Dataset, Matrix)> {
        let s = &self.spec;
        if n < s.dz {
            return Err(Error::input(format!("need n >= dz for whitening, got n = {n}, dz = {}", s.dz)));
        }
        let (x, z_raw) = self.draw(n, rng);
        let whitener = inverse_sqrt_spd(&second_moment(&z_raw)?)?;
        let data = self.assemble(x, &z_raw, &whitener, seed);
        Ok((data, whitener))
    }

    /// Samples `n >= 1` columns, whitening `Z` with a matrix estimated
    /// elsewhere. `Y = B·Z` still holds exactly.
    pub fn sample_with_whitener<R: Rng + ?Sized>(
        &self,
        n: usize,
        whitener: &Matrix,
        seed: u64,
        rng: &mut R,
    ) -> Result<Dataset> {
        let dz = self.spec.dz;
        if n == 0 {
            return Err(Error::input("sample size must be >= 1"));
        }
        if whitener.shape() != (dz, dz) {
            return Err(Error::input(format!("whitener must be {dz}x{dz}, got {:?}", whitener.shape())));
        }
        let (x, z_raw) = self.draw(n, rng);
        Ok(self.assemble(x, &z_raw, whitener, seed))
    }

    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Matrix, Matrix) {
        let s = &self.spec;
        let x = Matrix::standard_normal(s.dx, n, rng);
        let mut z_raw = x.row_block(0, s.dz);
        if s.noise_z > 0.0 {
            z_raw.axpy(s.noise_z, &Matrix::standard_normal(s.dz, n, rng));
        }
        (x, z_raw)
    }

    fn assemble(&self, x: Matrix, z_raw: &Matrix, whitener: &Matrix, seed: u64) -> Dataset {
        let z = whitener.matmul(z_raw);
        let y = self.b.matmul(&z);
        Dataset {
            x,
            z: Some(z),
            y: Some(y),
            provenance: Provenance {
                family: Family::SigmaLinear { spec: self.spec, b: self.b.clone() },
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Family {
    PrefixGaussian(PrefixGaussianSpec),
    SigmaLinear { spec: SigmaLinearSpec, b: Matrix },
    /// Data assembled by hand or loaded without a manifest.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub family: Family,
    pub seed: u64,
}

impl Provenance {
    pub fn external() -> Self {
        Self { family: Family::External, seed: 0 }
    }
}

/// Paired sample blocks; every present block has one column per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub z: Option<Matrix>,
    pub y: Option<Matrix>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(x: Matrix, z: Option<Matrix>, y: Option<Matrix>) -> Result<Self> {
        let d = Dataset { x, z, y, provenance: Provenance::external() };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.cols();
        for (name, block) in [("Z", &self.z), ("Y", &self.y)] {
            if let Some(b) = block {
                if b.cols() != n {
                    return Err(Error::input(format!("{name} has {} samples, X has {n}", b.cols())));
                }
            }
        }
        let finite = self.x.is_finite()
            && self.z.as_ref().is_none_or(Matrix::is_finite)
            && self.y.as_ref().is_none_or(Matrix::is_finite);
        if !finite {
            return Err(Error::input("dataset contains non-finite entries"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn z(&self) -> Result<&Matrix> {
        self.z.as_ref().ok_or_else(|| Error::input("dataset has no Z block"))
    }

    pub fn y(&self) -> Result<&Matrix> {
        self.y.as_ref().ok_or_else(|| Error::input("dataset has no Y block"))
    }

    /// Realized `B` and `σ` when the data came from the σ-linear family.
    pub fn sigma_linear(&self) -> Option<(&Matrix, f64)> {
        match &self.provenance.family {
            Family::SigmaLinear { spec, b } => Some((b, spec.sigma)),
            _ => None,
        }
    }

    pub fn select_columns(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_columns(idx),
            z: self.z.as_ref().map(|m| m.select_columns(idx)),
            y: self.y.as_ref().map(|m| m.select_columns(idx)),
            provenance: self.provenance.clone(),
        }
    }
}

/// Samples `n` columns from the prefix-Gaussian family.
pub fn sample_prefix_gaussian<R: Rng + ?Sized>(
    spec: &PrefixGaussianSpec,
    n: usize,
    seed: u64,
    rng: &mut R,
) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::input("sample size must be >= 1"));
    }
    let x = Matrix::standard_normal(spec.dx, n, rng);
    let eps_z = Matrix::standard_normal(spec.dz, n, rng);
    let eps_y = Matrix::standard_normal(spec.dy, n, rng);
    let mut z = x.row_block(0, spec.dz);
    z.axpy(spec.noise_z, &eps_z);
    let mut y = x.row_block(0, spec.dy);
    y.axpy(spec.noise_y, &eps_y);
    Ok(Dataset {
        x,
        z: Some(z),
        y: Some(y),
        provenance: Provenance { family: Family::PrefixGaussian(*spec), seed },
    })
}

/// Realizes a fresh `B` and samples `n` columns with it.
pub fn sample_sigma_linear<R: Rng + ?Sized>(
    spec: &SigmaLinearSpec,
    n: usize,
    seed: u64,
    rng: &mut R,
) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.dz {
        return Err(Error::input(format!("need n >= dz, got n = {n}, dz = {}", spec.dz)));
    }
    spec.realize(rng)?.sample(n, seed, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Samples reserved for processor training.
    pub n0: usize,
    /// When set, `n0 = round(alpha · n2)` ties the two sizes together.
    pub alpha: Option<f64>,
}

impl SplitConfig {
    pub fn fixed(n0: usize) -> Self {
        Self { n0, alpha: None }
    }

    pub fn from_alpha(alpha: f64, n2: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        let n0 = (alpha * n2 as f64).round() as usize;
        Ok(Self { n0, alpha: Some(alpha) })
    }
}

/// Randomly partitions the columns into `(down1, down2)` with `n0` and
/// `n − n0` samples.
pub fn split_downstream<R: Rng + ?Sized>(
    data: &Dataset,
    cfg: &SplitConfig,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    data.y()?;
    let n = data.len();
    if cfg.n0 == 0 || cfg.n0 >= n {
        return Err(Error::input(format!("need 0 < n0 < n, got n0 = {}, n = {n}", cfg.n0)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (first, rest) = idx.split_at(cfg.n0);
    Ok((data.select_columns(first), data.select_columns(rest)))
}

// --- CSV export / import -------------------------------------------------

const BLOCKS: [&str; 3] = ["X", "Z", "Y"];

/// Writes `X.csv`, `Z.csv`, `Y.csv` (present blocks only), `B.csv` for
/// σ-linear data, and `manifest.json` into `dir`.
///
/// Block files carry a `dim_0,…,dim_{k−1}` header and one sample per row.
pub fn export_csv(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let blocks = [Some(&data.x), data.z.as_ref(), data.y.as_ref()];
    for (name, block) in BLOCKS.iter().zip(blocks) {
        if let Some(m) = block {
            write_samples(m, &dir.join(format!("{name}.csv")))?;
        }
    }
    if let Family::SigmaLinear { b, .. } = &data.provenance.family {
        write_samples(&b.transpose(), &dir.join("B.csv"))?;
    }
    let manifest = DatasetManifest {
        samples: data.len(),
        blocks: BLOCKS
            .iter()
            .zip(blocks)
            .filter(|(_, b)| b.is_some())
            .map(|(n, _)| n.to_string())
            .collect(),
        family: match &data.provenance.family {
            Family::PrefixGaussian(s) => ManifestFamily::PrefixGaussian(*s),
            Family::SigmaLinear { spec, .. } => ManifestFamily::SigmaLinear(*spec),
            Family::External => ManifestFamily::External,
        },
        seed: data.provenance.seed,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Reads a directory written by [`export_csv`]. The manifest is optional;
/// without it the provenance is external.
pub fn import_csv(dir: &Path) -> Result<Dataset> {
    let x = read_samples(&dir.join("X.csv"))?;
    let z = optional(&dir.join("Z.csv"))?;
    let y = optional(&dir.join("Y.csv"))?;
    let manifest_path = dir.join("manifest.json");
    let provenance = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        let family = match m.family {
            ManifestFamily::PrefixGaussian(s) => Family::PrefixGaussian(s),
            ManifestFamily::SigmaLinear(spec) => {
                let b = read_samples(&dir.join("B.csv"))?.transpose();
                Family::SigmaLinear { spec, b }
            }
            ManifestFamily::External => Family::External,
        };
        Provenance { family, seed: m.seed }
    } else {
        Provenance::external()
    };
    let d = Dataset { x, z, y, provenance };
    d.validate()?;
    Ok(d)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    samples: usize,
    blocks: Vec<String>,
    family: ManifestFamily,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
enum ManifestFamily {
    PrefixGaussian(PrefixGaussianSpec),
    SigmaLinear(SigmaLinearSpec),
    External,
}

fn optional(path: &Path) -> Result<Option<Matrix>> {
    if path.exists() {
        read_samples(path).map(Some)
    } else {
        Ok(None)
    }
}

fn write_samples(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..m.rows()).map(|i| format!("dim_{i}")))?;
    for c in 0..m.cols() {
        // `{}` on f64 is the shortest string that round-trips exactly.
        w.write_record((0..m.rows()).map(|r| format!("{}", m[(r, c)])))?;
    }
    w.flush()?;
    Ok(())
}

fn read_samples(path: &Path) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let dims = header.len();
    for (i, h) in header.iter().enumerate() {
        if h != format!("dim_{i}") {
            return Err(Error::Parse(format!("{}: bad header field {h:?}", path.display())));
        }
    }
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != dims {
            return Err(Error::Parse(format!("{}: ragged row", path.display())));
        }
        samples.push(row);
    }
    // Rows on disk are samples; columns in memory are samples.
    Ok(Matrix::from_fn(dims, samples.len(), |r, c| samples[c][r]))
}
