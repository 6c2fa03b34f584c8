//! Fixtures shared by the criterion benches.

use cilab::models::{init_processor, prefix_processor};
use cilab::synthdata::sample_prefix_gaussian;
use cilab::{Activation, Dataset, InitScale, Matrix, PrefixGaussianSpec, Processor, ProcessorShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::standard_normal(rows, cols, &mut rng(seed))
}

/// Pretext and downstream samples from the reference distribution.
pub fn reference_data(n_pre: usize, n_down: usize) -> (Dataset, Dataset) {
    let spec = PrefixGaussianSpec::reference();
    let pre = sample_prefix_gaussian(&spec, n_pre, 1, &mut rng(1)).unwrap();
    let down = sample_prefix_gaussian(&spec, n_down, 2, &mut rng(2)).unwrap();
    (pre, down)
}

pub fn reference_linear() -> Processor {
    prefix_processor(&ProcessorShape::Linear { input: 100, output: 5 }, &mut rng(3)).unwrap()
}

pub fn relu_mlp(hidden: usize) -> Processor {
    let shape = ProcessorShape::Mlp { widths: vec![100, hidden, 5], activation: Activation::Relu };
    init_processor(&shape, InitScale::FanIn, &mut rng(4)).unwrap()
}
