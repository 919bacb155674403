//! Shared inputs for the criterion benchmarks.

use ndarray::Array2;
use sarcscore::CellImage;

/// Deterministic striped test image of the given size.
pub fn striped_image(h: usize, w: usize) -> CellImage {
    let px = Array2::from_shape_fn((h, w), |(y, x)| {
        let phase = (x as f64 * 0.9 + y as f64 * 0.3) * std::f64::consts::TAU / 7.0;
        0.3 * (1.0 + phase.cos()) * (1.0 + ((x * 13 + y * 7) % 17) as f64 / 170.0)
    });
    CellImage::new("bench", px).expect("finite pixels")
}
