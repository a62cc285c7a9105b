//! Deterministic inputs for the benchmarks.

use muralera_core::corpus::to_grayscale;
use muralera_core::encoding::GmmModel;
use muralera_core::{DescriptorSet, Plane, RgbImage};
use ndarray::Array2;

/// Striped, ringed test card. No randomness so timings compare across runs.
pub fn test_card(side: usize) -> RgbImage {
    RgbImage::from_fn(side, side, |x, y| {
        let (fx, fy) = (x as f64 / side as f64, y as f64 / side as f64);
        let r = ((fx - 0.5).powi(2) + (fy - 0.5).powi(2)).sqrt();
        [
            0.5 + 0.5 * (40.0 * r).sin(),
            0.5 + 0.5 * (23.0 * fx + 7.0 * fy).cos(),
            0.5 + 0.4 * (31.0 * fy).sin() * (11.0 * fx).cos(),
        ]
    })
}

pub fn test_gray(side: usize) -> Plane {
    to_grayscale(&test_card(side))
}

/// Cheap quasi-random values in `[0, 1)` from a Weyl sequence.
pub fn weyl(n: usize, offset: usize) -> Vec<f64> {
    const ALPHA: f64 = 0.618_033_988_749_894_9;
    (0..n).map(|i| ((i + offset) as f64 * ALPHA).fract()).collect()
}

pub fn descriptors(n: usize, dim: usize) -> DescriptorSet {
    DescriptorSet::from_rows(dim, weyl(n * dim, 1)).expect("rows fit dim")
}

pub fn gmm(k: usize, dim: usize) -> GmmModel {
    GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: ndarray_from(k, dim, weyl(k * dim, 7)),
        variances: ndarray_from(k, dim, weyl(k * dim, 11).iter().map(|v| 0.05 + 0.1 * v).collect()),
    }
}

pub fn histograms(n: usize, dim: usize) -> Array2<f64> {
    ndarray_from(n, dim, weyl(n * dim, 3))
}

fn ndarray_from(rows: usize, cols: usize, data: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
}
