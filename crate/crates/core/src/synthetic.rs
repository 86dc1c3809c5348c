//! Seeded synthetic test images: Voronoi mosaics and textured gratings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::grid::Image;

/// Nearest-seed labelling of a grid. Seeds are uniform in continuous
/// coordinates, pixel centres sit at `+0.5`, ties go to the lowest index.
#[derive(Clone, Debug, PartialEq)]
pub struct Voronoi {
    pub height: usize,
    pub width: usize,
    /// `(x, y)` seed positions in pixel units.
    pub seeds: Vec<(f64, f64)>,
    pub labels: Vec<usize>,
}

impl Voronoi {
    pub fn generate(height: usize, width: usize, n: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 || n > height * width {
            return Err(invalid(
                "region count",
                format!("{n} must lie in 1..={}", height * width),
            ));
        }
        let seeds: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(0.0..width as f64),
                    rng.random_range(0.0..height as f64),
                )
            })
            .collect();
        let labels = (0..height * width)
            .map(|i| nearest_seed(&seeds, (i % width) as f64 + 0.5, (i / width) as f64 + 0.5))
            .collect();
        Ok(Self {
            height,
            width,
            seeds,
            labels,
        })
    }

    pub fn paint(&self, values: &[f64]) -> Image {
        Image::from_fn(self.height, self.width, |r, c| values[self.labels[r * self.width + c]])
    }
}

pub fn nearest_seed(seeds: &[(f64, f64)], x: f64, y: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, (sx, sy)) in seeds.iter().enumerate() {
        let d = (x - sx).powi(2) + (y - sy).powi(2);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Voronoi mosaic with `n` regions, values uniform in `[0, 255)`.
pub fn voronoi_image(height: usize, width: usize, n: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Voronoi::generate(height, width, n, &mut rng)?;
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..255.0)).collect();
    Ok(v.paint(&values))
}

/// Voronoi mosaic with a seed-chosen region count in `2..=7`.
pub fn piecewise_constant(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=7usize).min(height * width);
    voronoi_image(height, width, n, rng.random()).expect("n is within range")
}

/// Sum of a few random oriented gratings over a linear shading, mapped into
/// `[0, 255]`.
pub fn textured(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(3.0..24.0);
            let k = 2.0 * std::f64::consts::PI / period;
            (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..6.3), rng.random_range(10.0..30.0))
        })
        .collect();
    let (gx, gy) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let (h2, w2) = (height as f64 / 2.0, width as f64 / 2.0);
    Image::from_fn(height, width, |r, c| {
        let (x, y) = (c as f64, r as f64);
        let mut v = 128.0 + gx * (x - w2) + gy * (y - h2);
        for (kx, ky, phase, amp) in &waves {
            v += amp * (kx * x + ky * y + phase).sin();
        }
        v.clamp(0.0, 255.0)
    })
}
