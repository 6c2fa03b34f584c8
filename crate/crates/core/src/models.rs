//! Processor families `f: R^dx → R^df` with exact reverse-mode gradients.
//!
//! Parameter ordering in a [`ParamVector`]:
//!
//! * linear: the weight matrix `A` (df × dx), row-major;
//! * MLP: for each layer in order, its weight matrix (out × in, row-major)
//!   followed by its bias vector.
//!
//! Hidden layers apply the activation; the output layer is affine.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Architecture of a processor, without parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProcessorShape {
    Linear { input: usize, output: usize },
    /// `widths = [dx, h1, …, df]`, at least one hidden layer.
    Mlp { widths: Vec<usize>, activation: Activation },
}

impl ProcessorShape {
    pub fn validate(&self) -> Result<()> {
        match self {
            ProcessorShape::Linear { input, output } => {
                if *input == 0 || *output == 0 {
                    return Err(Error::config("linear processor needs nonzero widths"));
                }
            }
            ProcessorShape::Mlp { widths, .. } => {
                if widths.len() < 3 {
                    return Err(Error::config("MLP needs at least one hidden layer"));
                }
                if widths.contains(&0) {
                    return Err(Error::config("MLP widths must be nonzero"));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ProcessorShape::Linear { input, .. } => *input,
            ProcessorShape::Mlp { widths, .. } => widths[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ProcessorShape::Linear { output, .. } => *output,
            ProcessorShape::Mlp { widths, .. } => *widths.last().unwrap(),
        }
    }

    /// Same architecture with a different output width.
    pub fn with_output_dim(&self, df: usize) -> ProcessorShape {
        match self {
            ProcessorShape::Linear { input, .. } => ProcessorShape::Linear { input: *input, output: df },
            ProcessorShape::Mlp { widths, activation } => {
                let mut w = widths.clone();
                *w.last_mut().unwrap() = df;
                ProcessorShape::Mlp { widths: w, activation: *activation }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ProcessorShape::Linear { input, output } => input * output,
            ProcessorShape::Mlp { widths, .. } => widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
        }
    }
}

/// Weight initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitScale {
    /// Standard deviation `1/√fan_in`.
    FanIn,
    /// All parameters zero.
    Zero,
    /// Fixed standard deviation for every weight matrix.
    Std(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn axpy(&mut self, s: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn scaled(&self, s: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * s).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProcessor {
    pub weights: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpProcessor {
    widths: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

impl MlpProcessor {
    pub fn from_layers(weights: Vec<Matrix>, biases: Vec<Vec<f64>>, activation: Activation) -> Result<Self> {
        if weights.len() < 2 || weights.len() != biases.len() {
            return Err(Error::input("MLP needs >= 2 layers with one bias per layer"));
        }
        let mut widths = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.cols() != *widths.last().unwrap() || b.len() != w.rows() {
                return Err(Error::input("inconsistent MLP layer shapes"));
            }
            widths.push(w.rows());
        }
        Ok(Self { widths, weights, biases, activation })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> impl Iterator<Item = (&Matrix, &[f64])> {
        self.weights.iter().zip(self.biases.iter().map(Vec::as_slice))
    }

    /// Forward pass keeping every layer input and hidden pre-activation.
    fn forward_cached(&self, x: &Matrix) -> (Matrix, Vec<Matrix>, Vec<Matrix>) {
        let depth = self.weights.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre_acts = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut a = w.matmul(&h);
            add_bias(&mut a, b);
            inputs.push(h);
            if l + 1 < depth {
                let act = self.activation;
                h = a.map(|v| act.apply(v));
                pre_acts.push(a);
            } else {
                h = a;
            }
        }
        (h, inputs, pre_acts)
    }
}

fn add_bias(a: &mut Matrix, b: &[f64]) {
    let cols = a.cols();
    for (r, bias) in b.iter().enumerate() {
        for v in &mut a.as_mut_slice()[r * cols..(r + 1) * cols] {
            *v += bias;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Processor {
    Linear(LinearProcessor),
    Mlp(MlpProcessor),
}

impl Processor {
    pub fn linear(weights: Matrix) -> Self {
        Processor::Linear(LinearProcessor { weights })
    }

    pub fn identity(d: usize) -> Self {
        Processor::linear(Matrix::identity(d))
    }

    pub fn shape(&self) -> ProcessorShape {
        match self {
            Processor::Linear(p) => ProcessorShape::Linear { input: p.weights.cols(), output: p.weights.rows() },
            Processor::Mlp(m) => ProcessorShape::Mlp { widths: m.widths.clone(), activation: m.activation },
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Processor::Linear(p) => p.weights.cols(),
            Processor::Mlp(m) => m.widths[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Processor::Linear(p) => p.weights.rows(),
            Processor::Mlp(m) => *m.widths.last().unwrap(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.shape().param_count()
    }

    pub fn params(&self) -> ParamVector {
        match self {
            Processor::Linear(p) => ParamVector(p.weights.as_slice().to_vec()),
            Processor::Mlp(m) => {
                let mut v = Vec::with_capacity(self.param_count());
                for (w, b) in m.weights.iter().zip(&m.biases) {
                    v.extend_from_slice(w.as_slice());
                    v.extend_from_slice(b);
                }
                ParamVector(v)
            }
        }
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        match self {
            Processor::Linear(p) => p.weights.as_mut_slice().copy_from_slice(&params.0),
            Processor::Mlp(m) => {
                let mut off = 0;
                for (w, b) in m.weights.iter_mut().zip(m.biases.iter_mut()) {
                    let nw = w.rows() * w.cols();
                    w.as_mut_slice().copy_from_slice(&params.0[off..off + nw]);
                    off += nw;
                    let nb = b.len();
                    b.copy_from_slice(&params.0[off..off + nb]);
                    off += nb;
                }
            }
        }
        Ok(())
    }

    pub fn with_params(&self, params: &ParamVector) -> Result<Processor> {
        let mut p = self.clone();
        p.set_params(params)?;
        Ok(p)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.input_dim() {
            return Err(Error::input(format!(
                "processor expects {} input rows, got {}",
                self.input_dim(),
                x.rows()
            )));
        }
        Ok(())
    }

    /// Applies the processor to every column of `x` (dx × n → df × n).
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(match self {
            Processor::Linear(p) => p.weights.matmul(x),
            Processor::Mlp(m) => m.forward_cached(x).0,
        })
    }

    /// Gradient of `⟨forward(θ, x), upstream⟩` with respect to θ.
    pub fn gradient(&self, x: &Matrix, upstream: &Matrix) -> Result<ParamVector> {
        self.check_input(x)?;
        if upstream.rows() != self.output_dim() || upstream.cols() != x.cols() {
            return Err(Error::input(format!(
                "upstream is {:?}, expected {}x{}",
                upstream.shape(),
                self.output_dim(),
                x.cols()
            )));
        }
        match self {
            Processor::Linear(_) => Ok(ParamVector(upstream.matmul_nt(x).into_vec())),
            Processor::Mlp(m) => {
                let (_, inputs, pre_acts) = m.forward_cached(x);
                let depth = m.weights.len();
                let mut grads: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(depth);
                let mut g = upstream.clone();
                for l in (0..depth).rev() {
                    let dw = g.matmul_nt(&inputs[l]);
                    let db: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    grads.push((dw, db));
                    if l > 0 {
                        let mut prev = m.weights[l].matmul_tn(&g);
                        let pre = &pre_acts[l - 1];
                        for (v, a) in prev.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                            *v *= m.activation.derivative(*a);
                        }
                        g = prev;
                    }
                }
                let mut out = Vec::with_capacity(self.param_count());
                for (dw, db) in grads.into_iter().rev() {
                    out.extend_from_slice(dw.as_slice());
                    out.extend_from_slice(&db);
                }
                Ok(ParamVector(out))
            }
        }
    }
}

/// Draws a processor of the given shape. Weights are i.i.d. Gaussian, biases
/// start at zero.
pub fn init_processor<R: Rng + ?Sized>(shape: &ProcessorShape, scale: InitScale, rng: &mut R) -> Result<Processor> {
    shape.validate()?;
    let draw = |rows: usize, cols: usize, rng: &mut R| -> Matrix {
        let std = match scale {
            InitScale::FanIn => 1.0 / (cols as f64).sqrt(),
            InitScale::Zero => 0.0,
            InitScale::Std(s) => s,
        };
        if std == 0.0 {
            Matrix::zeros(rows, cols)
        } else {
            Matrix::standard_normal(rows, cols, rng).scale(std)
        }
    };
    Ok(match shape {
        ProcessorShape::Linear { input, output } => Processor::linear(draw(*output, *input, rng)),
        ProcessorShape::Mlp { widths, activation } => {
            let mut weights = Vec::new();
            let mut biases = Vec::new();
            for w in widths.windows(2) {
                weights.push(draw(w[1], w[0], rng));
                biases.push(vec![0.0; w[1]]);
            }
            Processor::Mlp(MlpProcessor { widths: widths.clone(), weights, biases, activation: *activation })
        }
    })
}

/// Input scale that keeps a tanh unit in its near-linear range.
const PREFIX_GAIN: f64 = 0.05;

/// A processor computing `x ↦ x[0:df]` (approximately, for tanh networks).
///
/// Linear shapes get the exact coordinate selection. Networks route the
/// leading inputs through dedicated hidden units:
///
/// * relu: units `2i` and `2i+1` carry `relu(x_i)` and `relu(−x_i)`, whose
///   difference restores `x_i` exactly; hidden widths must be at least `2·df`.
/// * tanh: unit `i` carries `tanh(g·x_i)` for a small gain `g`, undone at the
///   output; hidden widths must be at least `df`.
///
/// The remaining hidden units start fan-in random with zero outgoing weight,
/// so they leave the initial map unchanged.
pub fn prefix_processor<R: Rng + ?Sized>(shape: &ProcessorShape, rng: &mut R) -> Result<Processor> {
    shape.validate()?;
    match shape {
        ProcessorShape::Linear { input, output } => {
            if output > input {
                return Err(Error::config("prefix selection needs output <= input"));
            }
            Ok(Processor::linear(Matrix::from_fn(*output, *input, |r, c| if r == c { 1.0 } else { 0.0 })))
        }
        ProcessorShape::Mlp { widths, activation } => {
            let df = *widths.last().unwrap();
            if df > widths[0] {
                return Err(Error::config("prefix selection needs output <= input"));
            }
            // Path units per output coordinate, and the entries of each path.
            let (per, enter, pass, leave): (usize, &[f64], f64, &[f64]) = match activation {
                Activation::Relu => (2, &[1.0, -1.0], 1.0, &[1.0, -1.0]),
                Activation::Tanh => (1, &[PREFIX_GAIN], 1.0, &[1.0 / PREFIX_GAIN]),
            };
            let path = per * df;
            if widths[1..widths.len() - 1].iter().any(|&w| w < path) {
                return Err(Error::config(format!(
                    "prefix initialization needs hidden widths >= {path} for {} networks",
                    activation.name()
                )));
            }
            let layers = widths.len() - 1;
            let mut weights = Vec::with_capacity(layers);
            let mut biases = Vec::with_capacity(layers);
            for (l, w) in widths.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0], w[1]);
                let m = if l + 1 == layers {
                    let mut m = Matrix::zeros(fan_out, fan_in);
                    for i in 0..df {
                        for (k, v) in leave.iter().enumerate() {
                            m[(i, per * i + k)] = *v;
                        }
                    }
                    m
                } else {
                    let std = 1.0 / (fan_in as f64).sqrt();
                    let mut m = Matrix::standard_normal(fan_out, fan_in, rng).scale(std);
                    for r in 0..path {
                        for c in 0..fan_in {
                            m[(r, c)] = 0.0;
                        }
                    }
                    for i in 0..df {
                        for (k, &e) in enter.iter().enumerate().take(per) {
                            let r = per * i + k;
                            if l == 0 {
                                m[(r, i)] = e;
                            } else {
                                m[(r, r)] = pass;
                            }
                        }
                    }
                    m
                };
                weights.push(m);
                biases.push(vec![0.0; fan_out]);
            }
            Ok(Processor::Mlp(MlpProcessor { widths: widths.clone(), weights, biases, activation: *activation }))
        }
    }
}

// --- checkpoints -----------------------------------------------------------

/// Writes a text checkpoint: `key = value` header lines, a `params = N` line,
/// then one parameter per line in [`ParamVector`] order.
pub fn save_checkpoint(p: &Processor, path: &Path) -> Result<()> {
    let mut s = String::from("# cilab processor checkpoint\n");
    match p {
        Processor::Linear(l) => {
            writeln!(s, "kind = linear").unwrap();
            writeln!(s, "widths = {},{}", l.weights.cols(), l.weights.rows()).unwrap();
        }
        Processor::Mlp(m) => {
            writeln!(s, "kind = mlp").unwrap();
            let w: Vec<String> = m.widths.iter().map(usize::to_string).collect();
            writeln!(s, "widths = {}", w.join(",")).unwrap();
            writeln!(s, "activation = {}", m.activation.name()).unwrap();
        }
    }
    let params = p.params();
    writeln!(s, "params = {}", params.len()).unwrap();
    for v in params.as_slice() {
        writeln!(s, "{v}").unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Processor> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let mut kind = None;
    let mut widths: Option<Vec<usize>> = None;
    let mut activation = Activation::Tanh;
    let count = loop {
        let line = lines.next().ok_or_else(|| Error::Parse("checkpoint ended before params".into()))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected key = value, got {line:?}")))?;
        let v = v.trim();
        match k.trim() {
            "kind" => kind = Some(v.to_string()),
            "widths" => {
                widths = Some(
                    v.split(',')
                        .map(|w| w.trim().parse().map_err(|_| Error::Parse(format!("bad width {w:?}"))))
                        .collect::<Result<_>>()?,
                )
            }
            "activation" => activation = v.parse()?,
            "params" => break v.parse::<usize>().map_err(|_| Error::Parse(format!("bad count {v:?}")))?,
            other => return Err(Error::Parse(format!("unknown checkpoint key {other:?}"))),
        }
    };
    let widths = widths.ok_or_else(|| Error::Parse("checkpoint lacks widths".into()))?;
    let shape = match kind.as_deref() {
        Some("linear") if widths.len() == 2 => ProcessorShape::Linear { input: widths[0], output: widths[1] },
        Some("mlp") => ProcessorShape::Mlp { widths, activation },
        other => return Err(Error::Parse(format!("bad checkpoint kind {other:?}"))),
    };
    let values = lines
        .map(|l| l.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad parameter {l:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != count {
        return Err(Error::Parse(format!("expected {count} parameters, found {}", values.len())));
    }
    let mut p = init_processor(&shape, InitScale::Zero, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    p.set_params(&ParamVector(values))?;
    Ok(p)
}
