use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::smooth;
use crate::Tensor;

/// How probe coordinates are drawn.
#[derive(Clone, Debug)]
pub enum CoordinateSampler {
    /// Probability proportional to `|M|`.
    Weighted(WeightedIndex<f64>),
    /// Uniform with replacement.
    Uniform(usize),
    /// A fresh random permutation per pass over all coordinates.
    Permutation { order: Vec<usize>, pos: usize },
}

impl CoordinateSampler {
    /// Sampler over `|map|`, uniform if the map is all zero or not finite.
    pub fn from_map(map: &Tensor) -> Self {
        // rescale so the cumulative sum cannot overflow
        let top = map.max_abs();
        let w: Vec<f64> = map.data().iter().map(|v| v.abs() / top).collect();
        match WeightedIndex::new(&w) {
            Ok(d) if top > 0.0 && top.is_finite() => CoordinateSampler::Weighted(d),
            _ => {
                log::debug!("gradient map carries no weight; sampling uniformly");
                CoordinateSampler::Uniform(w.len())
            }
        }
    }

    pub fn permutation(n: usize) -> Self {
        CoordinateSampler::Permutation {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        match self {
            CoordinateSampler::Weighted(d) => d.sample(rng),
            CoordinateSampler::Uniform(n) => rng.gen_range(0..*n),
            CoordinateSampler::Permutation { order, pos } => {
                if *pos == order.len() {
                    order.shuffle(rng);
                    *pos = 0;
                }
                *pos += 1;
                order[*pos - 1]
            }
        }
    }
}

/// The smoothed one-hot stamp at `coord`, scaled to a unit maximum.
pub fn stamp(shape: &[usize], coord: usize, kernel: &Tensor) -> Result<Tensor> {
    let mut q = Tensor::zeros(shape);
    q.data_mut()[coord] = 1.0;
    if kernel.len() == 1 {
        return Ok(q);
    }
    let d = smooth(&q, kernel)?;
    let m = d.max_abs();
    Ok(d.map(|v| v / m))
}

/// Draw a coordinate with probability `|M| / Σ|M|` and return its smoothed
/// stamp together with the coordinate.
pub fn sample_perturbation(map: &Tensor, kernel: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, usize)> {
    let coord = CoordinateSampler::from_map(map).draw(rng);
    Ok((stamp(map.shape(), coord, kernel)?, coord))
}
