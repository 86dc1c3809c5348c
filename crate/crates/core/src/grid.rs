//! Image and vector-field containers, the discrete gradient and its adjoint,
//! the `cut`/`shrink` pair, and the energy functionals shared by every solver.
//!
//! Discretization: forward differences with a replicate (Neumann) boundary, so
//! the difference in the last column (x) or last row (y) is zero. The adjoint
//! is the exact transpose of that stencil, not an independent divergence
//! formula, so `<grad u, b> = <u, grad^T b>` holds to rounding.
//!
//! Intensities live on the [0, 255] scale. Multi-channel images are handled
//! channel by channel.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::outer::ImagingOperator;

/// Dense `channels x height x width` grid of intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Single-channel image from a row-major buffer.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1, "image dimensions must be positive");
        assert!(value.is_finite());
        Self {
            height,
            width,
            channels: 1,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height >= 1 && width >= 1, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let v = f(r, c);
                assert!(v.is_finite(), "non-finite value at ({r}, {c})");
                data.push(v);
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    /// Stacks single-channel images of equal size into one multi-channel image.
    pub fn from_channels(planes: &[Image]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| invalid("channels", "at least one plane is required"))?;
        let mut data = Vec::with_capacity(first.pixel_count() * planes.len());
        for p in planes {
            p.require_single_channel()?;
            if p.dims() != first.dims() {
                return Err(shape_mismatch(first.shape_str(), p.shape_str()));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            height: first.height,
            width: first.width,
            channels: planes.len(),
            data,
        })
    }

    /// Builds an image from a buffer the caller guarantees finite.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Pixels per channel (`H * W`).
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn get_channel(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[channel * self.pixel_count() + row * self.width + col]
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn channel_image(&self, k: usize) -> Image {
        Image::from_raw(self.height, self.width, self.channel(k).to_vec())
    }

    pub fn split_channels(&self) -> Vec<Image> {
        (0..self.channels).map(|k| self.channel_image(k)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || row + height > self.height || col + width > self.width {
            return Err(invalid(
                "crop",
                format!(
                    "{height}x{width} at ({row}, {col}) does not fit in {}",
                    self.shape_str()
                ),
            ));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for k in 0..self.channels {
            let plane = self.channel(k);
            for r in row..row + height {
                data.extend_from_slice(&plane[r * self.width + col..r * self.width + col + width]);
            }
        }
        Ok(Image {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    pub fn require_single_channel(&self) -> Result<()> {
        if self.channels != 1 {
            return Err(shape_mismatch(
                "single-channel image",
                format!("{} channels", self.channels),
            ));
        }
        Ok(())
    }

    pub fn require_same_shape(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() || self.channels != other.channels {
            return Err(shape_mismatch(self.shape_str(), other.shape_str()));
        }
        Ok(())
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Per-pixel multi-channel field. Channel 0 is the x-component and channel 1
/// the y-component for the analytic solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl VectorField {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("vector field"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height >= 1 && width >= 1 && channels >= 1);
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub(crate) fn from_xy(height: usize, width: usize, x: Vec<f64>, y: Vec<f64>) -> Self {
        debug_assert_eq!(x.len(), height * width);
        debug_assert_eq!(y.len(), height * width);
        let mut data = x;
        data.extend_from_slice(&y);
        Self {
            height,
            width,
            channels: 2,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> VectorField {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()));
        VectorField { data, ..*self }
    }

    /// Element-wise sum of two fields of identical shape.
    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        if self.dims() != other.dims() || self.channels != other.channels {
            return Err(shape_mismatch(
                format!("{}x{}x{}", self.channels, self.height, self.width),
                format!("{}x{}x{}", other.channels, other.height, other.width),
            ));
        }
        VectorField::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        )
    }

    pub(crate) fn require_two_channel(&self) -> Result<()> {
        if self.channels != 2 {
            return Err(shape_mismatch(
                "2-channel field",
                format!("{} channels", self.channels),
            ));
        }
        Ok(())
    }
}

fn check_dims(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(invalid(
            "dimensions",
            format!("{channels}x{height}x{width} has a zero extent"),
        ));
    }
    if len != height * width * channels {
        return Err(shape_mismatch(
            format!("{} values", height * width * channels),
            format!("{len} values"),
        ));
    }
    Ok(())
}

/// TV axis weights `(w_x, w_y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisWeights {
    pub x: f64,
    pub y: f64,
}

impl AxisWeights {
    /// Plain anisotropic TV, both weights 1.
    pub fn unweighted() -> Self {
        Self { x: 1.0, y: 1.0 }
    }

    /// Weighted TV `w |grad_x| + (1 - w) |grad_y|`, `0 < w < 1`.
    pub fn anisotropic(w: f64) -> Result<Self> {
        let weights = Self { x: w, y: 1.0 - w };
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<()> {
        let unweighted = self.x == 1.0 && self.y == 1.0;
        let convex = self.x > 0.0
            && self.x < 1.0
            && self.y > 0.0
            && self.y < 1.0
            && (self.x + self.y - 1.0).abs() <= 1e-12;
        if unweighted || convex {
            Ok(())
        } else {
            Err(invalid(
                "axis weights",
                format!(
                    "({}, {}) must be (1, 1) or (w, 1 - w) with 0 < w < 1",
                    self.x, self.y
                ),
            ))
        }
    }
}

impl Default for AxisWeights {
    fn default() -> Self {
        Self::unweighted()
    }
}

pub const DEFAULT_BETA: f64 = 0.2;
pub const DEFAULT_INNER_ITERS: usize = 30;
pub const DEFAULT_OUTER_ITERS: usize = 100;

/// Parameters shared by the inner ROF solvers and the outer loops.
///
/// `alpha = None` means "pure ROF" for the inner solvers (the fidelity weight
/// is 1) and "2.01 * ||A^T A||" for the outer loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    /// Dual step, `0 < beta < 1/4`.
    pub beta: f64,
    pub alpha: Option<f64>,
    pub weights: AxisWeights,
    pub inner_iters: usize,
    pub outer_iters: usize,
}

impl SolverConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        Self {
            lambda,
            beta: DEFAULT_BETA,
            alpha: None,
            weights: AxisWeights::unweighted(),
            inner_iters: DEFAULT_INNER_ITERS,
            outer_iters: DEFAULT_OUTER_ITERS,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("{} must be >= 0", self.lambda)));
        }
        if !(self.beta > 0.0 && self.beta < 0.25) {
            return Err(invalid("beta", format!("{} must lie in (0, 1/4)", self.beta)));
        }
        if let Some(alpha) = self.alpha {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(invalid("alpha", format!("{alpha} must be > 0")));
            }
        }
        self.weights.validate()?;
        if self.inner_iters == 0 || self.outer_iters == 0 {
            return Err(invalid("iterations", "iteration counts must be >= 1"));
        }
        Ok(())
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = Some(alpha);
        self.validated()
    }

    pub fn with_weights(mut self, weights: AxisWeights) -> Result<Self> {
        self.weights = weights;
        self.validated()
    }

    /// Fidelity weight of the ROF subproblem (1 when `alpha` is unset).
    pub fn fidelity_weight(&self) -> f64 {
        self.alpha.unwrap_or(1.0)
    }

    /// Regularization weight after dividing the subproblem by `alpha`.
    pub fn lambda_eff(&self) -> f64 {
        self.lambda / self.fidelity_weight()
    }

    /// Per-axis bounds on the dual field: `lambda_eff * w / beta`.
    pub fn dual_bounds(&self) -> (f64, f64) {
        let scale = self.lambda_eff() / self.beta;
        (scale * self.weights.x, scale * self.weights.y)
    }
}

// ---------------------------------------------------------------------------
// Stencils on raw row-major planes.

pub(crate) fn forward_diff(u: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    for r in 0..h {
        let row = &u[r * w..(r + 1) * w];
        let gxr = &mut gx[r * w..(r + 1) * w];
        for c in 0..w - 1 {
            gxr[c] = row[c + 1] - row[c];
        }
        gxr[w - 1] = 0.0;
        let gyr = &mut gy[r * w..(r + 1) * w];
        if r + 1 < h {
            let next = &u[(r + 1) * w..(r + 2) * w];
            for c in 0..w {
                gyr[c] = next[c] - row[c];
            }
        } else {
            gyr.fill(0.0);
        }
    }
}

/// `out = grad^T (bx, by)`. Entries of `bx` in the last column and of `by` in
/// the last row do not contribute, matching the zero rows of `grad`.
pub(crate) fn adjoint_diff(bx: &[f64], by: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for r in 0..h {
        let o = &mut out[r * w..(r + 1) * w];
        let bxr = &bx[r * w..(r + 1) * w];
        for c in 0..w {
            let left = if c >= 1 { bxr[c - 1] } else { 0.0 };
            let here = if c + 1 < w { bxr[c] } else { 0.0 };
            o[c] = left - here;
        }
        if r + 1 < h {
            let byr = &by[r * w..(r + 1) * w];
            for c in 0..w {
                o[c] -= byr[c];
            }
        }
        if r >= 1 {
            let up = &by[(r - 1) * w..r * w];
            for c in 0..w {
                o[c] += up[c];
            }
        }
    }
}

pub fn gradient(u: &Image) -> Result<VectorField> {
    u.require_single_channel()?;
    let (h, w) = u.dims();
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    forward_diff(u.as_slice(), h, w, &mut gx, &mut gy);
    Ok(VectorField::from_xy(h, w, gx, gy))
}

pub fn adjoint_gradient(b: &VectorField) -> Result<Image> {
    b.require_two_channel()?;
    let (h, w) = b.dims();
    let mut out = vec![0.0; h * w];
    adjoint_diff(b.component(0), b.component(1), h, w, &mut out);
    Ok(Image::from_raw(h, w, out))
}

/// Clamp to `[-beta, beta]`.
#[inline]
pub fn cut(x: f64, beta: f64) -> f64 {
    if x > beta {
        beta
    } else if x < -beta {
        -beta
    } else {
        x
    }
}

/// Soft threshold, the complement of [`cut`].
#[inline]
pub fn shrink(x: f64, beta: f64) -> f64 {
    x - cut(x, beta)
}

pub fn cut_field(b: &VectorField, beta: f64) -> VectorField {
    b.map(|v| cut(v, beta))
}

pub fn shrink_field(b: &VectorField, beta: f64) -> VectorField {
    b.map(|v| shrink(v, beta))
}

pub(crate) fn weighted_tv_plane(u: &[f64], h: usize, w: usize, weights: AxisWeights) -> f64 {
    let mut sx = 0.0;
    let mut sy = 0.0;
    for r in 0..h {
        let row = &u[r * w..(r + 1) * w];
        for c in 0..w - 1 {
            sx += (row[c + 1] - row[c]).abs();
        }
        if r + 1 < h {
            let next = &u[(r + 1) * w..(r + 2) * w];
            for c in 0..w {
                sy += (next[c] - row[c]).abs();
            }
        }
    }
    weights.x * sx + weights.y * sy
}

/// Weighted anisotropic TV, summed over channels.
pub fn tv_energy(u: &Image, weights: AxisWeights) -> f64 {
    let (h, w) = u.dims();
    (0..u.channels())
        .map(|k| weighted_tv_plane(u.channel(k), h, w, weights))
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `1/2 ||A u - f||^2 + lambda * TV_w(u)`.
pub fn total_energy(
    u: &Image,
    f: &[f64],
    op: &dyn ImagingOperator,
    cfg: &SolverConfig,
) -> Result<f64> {
    let au = op.apply(u)?;
    if au.len() != f.len() {
        return Err(shape_mismatch(
            format!("{} observations", au.len()),
            format!("{} observations", f.len()),
        ));
    }
    Ok(0.5 * sq_dist(&au, f) + cfg.lambda * tv_energy(u, cfg.weights))
}

/// [`total_energy`] with both terms divided by the pixel count, so values are
/// comparable across resolutions.
pub fn normalized_energy(
    u: &Image,
    f: &[f64],
    op: &dyn ImagingOperator,
    cfg: &SolverConfig,
) -> Result<f64> {
    Ok(total_energy(u, f, op, cfg)? / u.pixel_count() as f64)
}

/// `(alpha/2) ||u - v||^2 + lambda * TV_w(u)`, the inner subproblem objective.
pub fn rof_energy(u: &Image, v: &Image, cfg: &SolverConfig) -> Result<f64> {
    u.require_same_shape(v)?;
    Ok(0.5 * cfg.fidelity_weight() * sq_dist(u.as_slice(), v.as_slice())
        + cfg.lambda * tv_energy(u, cfg.weights))
}
