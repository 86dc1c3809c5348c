//! PSNR and SSIM on the [0, 255] scale.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::Image;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Axis-aligned rectangle of pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(img: &Image) -> Self {
        Self {
            row: 0,
            col: 0,
            height: img.height(),
            width: img.width(),
        }
    }

    /// All rows, dropping `margin` columns on the left and right.
    pub fn without_side_columns(height: usize, width: usize, margin: usize) -> Result<Self> {
        if 2 * margin >= width {
            return Err(invalid(
                "region",
                format!("margin {margin} leaves no columns of {width}"),
            ));
        }
        Ok(Self {
            row: 0,
            col: margin,
            height,
            width: width - 2 * margin,
        })
    }

    pub fn crop(&self, img: &Image) -> Result<Image> {
        img.crop(self.row, self.col, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub region: Option<Region>,
}

impl MetricReport {
    pub fn compute(x: &Image, y: &Image, region: Option<Region>) -> Result<Self> {
        let (x, y) = match region {
            Some(r) => (r.crop(x)?, r.crop(y)?),
            None => (x.clone(), y.clone()),
        };
        Ok(Self {
            psnr: psnr(&x, &y, PEAK)?,
            ssim: ssim(&x, &y)?,
            region,
        })
    }
}

pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    x.require_same_shape(y)?;
    let sum: f64 = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x.len() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Image, y: &Image, peak: f64) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Mean SSIM over all 8x8 windows (stride 1, uniform weights, population
/// moments), averaged over channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    ssim_with(x, y, SSIM_WINDOW, PEAK)
}

pub fn ssim_with(x: &Image, y: &Image, window: usize, peak: f64) -> Result<f64> {
    x.require_same_shape(y)?;
    let (h, w) = x.dims();
    if window == 0 || h < window || w < window {
        return Err(invalid(
            "ssim",
            format!("{h}x{w} image is smaller than the {window}x{window} window"),
        ));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let total: f64 = (0..x.channels())
        .map(|k| ssim_plane(x.channel(k), y.channel(k), h, w, window, c1, c2))
        .sum();
    Ok(total / x.channels() as f64)
}

/// Summed-area tables of the five moments, centered on a shared offset to
/// keep the running sums small.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, win: usize, c1: f64, c2: f64) -> f64 {
    let shift = (x.iter().sum::<f64>() + y.iter().sum::<f64>()) / (2 * x.len()) as f64;
    let stride = w + 1;
    let mut sat = vec![[0.0f64; 5]; (h + 1) * stride];
    for r in 0..h {
        let mut row = [0.0f64; 5];
        for c in 0..w {
            let a = x[r * w + c] - shift;
            let b = y[r * w + c] - shift;
            let m = [a, b, a * a, b * b, a * b];
            for k in 0..5 {
                row[k] += m[k];
                sat[(r + 1) * stride + c + 1][k] = sat[r * stride + c + 1][k] + row[k];
            }
        }
    }
    let n = (win * win) as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for r in 0..=h - win {
        for c in 0..=w - win {
            let mut s = [0.0f64; 5];
            for k in 0..5 {
                s[k] = sat[(r + win) * stride + c + win][k] - sat[r * stride + c + win][k]
                    - sat[(r + win) * stride + c][k]
                    + sat[r * stride + c][k];
            }
            let (ma, mb) = (s[0] / n, s[1] / n);
            let va = (s[2] / n - ma * ma).max(0.0);
            let vb = (s[3] / n - mb * mb).max(0.0);
            let cov = s[4] / n - ma * mb;
            let (mx, my) = (ma + shift, mb + shift);
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}
