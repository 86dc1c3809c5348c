//! Linear imaging operators and the two outer loops for
//! `min_U 1/2 ||AU - f||^2 + lambda TV_w(U)`.
//!
//! Observations are flat vectors so that non-image data such as per-ray
//! delays fit the same interface.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::grid::{normalized_energy, tv_energy, Image, SolverConfig};
use crate::rof::{InnerSolver, RofOptions};

/// A linear map from `H x W` images to flat observation vectors.
pub trait ImagingOperator: Send + Sync {
    fn input_dims(&self) -> (usize, usize);

    fn output_len(&self) -> usize;

    /// `out = A u`. Slice lengths are checked by the callers.
    fn apply_into(&self, u: &[f64], out: &mut [f64]);

    /// `out = A^T y`.
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);

    fn input_len(&self) -> usize {
        let (h, w) = self.input_dims();
        h * w
    }

    fn apply(&self, u: &Image) -> Result<Vec<f64>> {
        u.require_single_channel()?;
        if u.dims() != self.input_dims() {
            let (h, w) = self.input_dims();
            return Err(shape_mismatch(format!("{h}x{w} image"), u.shape_str()));
        }
        let mut out = vec![0.0; self.output_len()];
        self.apply_into(u.as_slice(), &mut out);
        Ok(out)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Result<Image> {
        if y.len() != self.output_len() {
            return Err(shape_mismatch(
                format!("{} observations", self.output_len()),
                format!("{} observations", y.len()),
            ));
        }
        let (h, w) = self.input_dims();
        let mut out = vec![0.0; h * w];
        self.adjoint_into(y, &mut out);
        Image::from_vec(h, w, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Identity {
    height: usize,
    width: usize,
}

impl Identity {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }
}

impl ImagingOperator for Identity {
    fn input_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn output_len(&self) -> usize {
        self.height * self.width
    }

    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(u);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
}

/// Row-compressed sparse matrix; row `r` lists `(pixel, weight)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    height: usize,
    width: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseOperator {
    pub fn from_rows(height: usize, width: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("operator", "input grid must be non-empty"));
        }
        let n = height * width;
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (r, row) in rows.into_iter().enumerate() {
            for (c, v) in row {
                if c >= n {
                    return Err(invalid(
                        "operator",
                        format!("row {r} references pixel {c} outside {height}x{width}"),
                    ));
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite("operator entry"));
                }
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            height,
            width,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, v)| v).sum()
    }

    /// Same sparsity, every entry multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            vals: self.vals.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.height * self.width;
        (0..self.rows())
            .map(|r| {
                let mut row = vec![0.0; n];
                for (c, v) in self.row(r) {
                    row[c] += v;
                }
                row
            })
            .collect()
    }
}

impl ImagingOperator for SparseOperator {
    fn input_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn output_len(&self) -> usize {
        self.rows()
    }

    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(r).map(|(c, v)| v * u[c]).sum();
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (r, yr) in y.iter().enumerate() {
            for (c, v) in self.row(r) {
                out[c] += v * yr;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStatus {
    Converged,
    MaxIterations,
    /// `A^T A x` vanished; the operator is (numerically) zero.
    ZeroOperator,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    pub iterations: usize,
    pub status: NormStatus,
}

/// Power iteration for the largest eigenvalue of `A^T A`.
pub fn estimate_operator_norm(
    a: &dyn ImagingOperator,
    tol: f64,
    max_iters: usize,
    seed: u64,
) -> NormEstimate {
    let n = a.input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut x);
    let mut ax = vec![0.0; a.output_len()];
    let mut y = vec![0.0; n];
    let mut value = 0.0;
    for it in 1..=max_iters {
        a.apply_into(&x, &mut ax);
        a.adjoint_into(&ax, &mut y);
        let next = norm(&y);
        if next == 0.0 || !next.is_finite() {
            return NormEstimate {
                value: 0.0,
                iterations: it,
                status: NormStatus::ZeroOperator,
            };
        }
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi = yi / next;
        }
        let done = (next - value).abs() <= tol * next;
        value = next;
        if done {
            return NormEstimate {
                value,
                iterations: it,
                status: NormStatus::Converged,
            };
        }
    }
    NormEstimate {
        value,
        iterations: max_iters,
        status: NormStatus::MaxIterations,
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn normalize(x: &mut [f64]) {
    let n = norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

pub const ALPHA_SAFETY: f64 = 2.01;
const NORM_TOL: f64 = 1e-10;
const NORM_MAX_ITERS: usize = 5000;
const NORM_SEED: u64 = 0x7a11;

/// Resolves `cfg.alpha` against `||A^T A||`: defaults to `2.01 ||A^T A||` and
/// rejects explicit values at or below `2 ||A^T A||`.
pub fn resolve_alpha(a: &dyn ImagingOperator, cfg: &SolverConfig) -> Result<f64> {
    let est = estimate_operator_norm(a, NORM_TOL, NORM_MAX_ITERS, NORM_SEED);
    let bound = 2.0 * est.value;
    match cfg.alpha {
        Some(alpha) if alpha <= bound => Err(Error::AlphaTooSmall { alpha, bound }),
        Some(alpha) => Ok(alpha),
        None if est.status == NormStatus::ZeroOperator => Ok(1.0),
        None => Ok(ALPHA_SAFETY * est.value),
    }
}

/// Scaled dual variable of the outer loops.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub d: Vec<f64>,
    pub t: usize,
}

impl DualState {
    pub fn new(len: usize) -> Self {
        Self {
            d: vec![0.0; len],
            t: 0,
        }
    }
}

/// How the dual variable absorbs the data mismatch `f - AU`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualUpdate {
    /// `d <- d + f - AU`. Fixed points satisfy `AU = f`, so the iteration
    /// drives the data term to zero and then minimizes TV on that set.
    #[default]
    Accumulate,
    /// Fixed points minimize the penalized objective `1/2 ||AU - f||^2 + lambda TV`.
    /// The proximal loop keeps `d = 0`; the dual-first loop uses
    /// `d <- (d + f - AU) / 2`.
    Penalized,
}

/// Solver for the subproblem `argmin (alpha/2)||U - V||^2 + lambda TV_w(U)`.
/// `cfg.alpha` is already resolved when this is called.
pub trait ProxSolver {
    fn prox(&self, v: &Image, cfg: &SolverConfig) -> Result<Image>;
}

impl ProxSolver for InnerSolver {
    fn prox(&self, v: &Image, cfg: &SolverConfig) -> Result<Image> {
        Ok(self.solve(v, cfg, cfg.inner_iters, RofOptions::default())?.u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OuterOptions {
    pub dual_update: DualUpdate,
    pub record_trace: bool,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            dual_update: DualUpdate::Accumulate,
            record_trace: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OuterResult {
    pub u: Image,
    /// `normalized_energy` of `U^0 .. U^T` (empty when tracing is off).
    pub energy_trace: Vec<f64>,
    pub dual: DualState,
    pub alpha: f64,
}

struct Setup {
    cfg: SolverConfig,
    h: usize,
    w: usize,
}

fn setup(f: &[f64], a: &dyn ImagingOperator, cfg: &SolverConfig) -> Result<Setup> {
    cfg.validate()?;
    if f.len() != a.output_len() {
        return Err(shape_mismatch(
            format!("{} observations", a.output_len()),
            format!("{} observations", f.len()),
        ));
    }
    if !f.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("observations"));
    }
    let alpha = resolve_alpha(a, cfg)?;
    let (h, w) = a.input_dims();
    Ok(Setup {
        cfg: SolverConfig {
            alpha: Some(alpha),
            ..cfg.clone()
        },
        h,
        w,
    })
}

fn energy_from(u: &Image, au: &[f64], f: &[f64], cfg: &SolverConfig) -> f64 {
    let fid: f64 = au.iter().zip(f).map(|(x, y)| 0.5 * (x - y) * (x - y)).sum();
    (fid + cfg.lambda * tv_energy(u, cfg.weights)) / u.pixel_count() as f64
}

/// Proximal-gradient loop: `V = U - (1/alpha) A^T (AU - f - d)`, `U = prox(V)`,
/// `d += f - AU`, from `U^0 = 0`, `d^0 = 0`.
pub fn proximal_outer(
    f: &[f64],
    a: &dyn ImagingOperator,
    cfg: &SolverConfig,
    inner: &dyn ProxSolver,
) -> Result<OuterResult> {
    proximal_outer_with(f, a, cfg, inner, OuterOptions::default())
}

pub fn proximal_outer_with(
    f: &[f64],
    a: &dyn ImagingOperator,
    cfg: &SolverConfig,
    inner: &dyn ProxSolver,
    opts: OuterOptions,
) -> Result<OuterResult> {
    let Setup { cfg, h, w } = setup(f, a, cfg)?;
    let alpha = cfg.alpha.expect("resolved");
    let m = f.len();
    let mut u = Image::zeros(h, w);
    let mut dual = DualState::new(m);
    let mut au = vec![0.0; m];
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(energy_from(&u, &au, f, &cfg));
    }
    let mut resid = vec![0.0; m];
    let mut step = vec![0.0; h * w];
    for _ in 0..cfg.outer_iters {
        a.apply_into(u.as_slice(), &mut au);
        for i in 0..m {
            resid[i] = au[i] - f[i] - dual.d[i];
        }
        a.adjoint_into(&resid, &mut step);
        let v: Vec<f64> = u
            .as_slice()
            .iter()
            .zip(&step)
            .map(|(ui, si)| ui - si / alpha)
            .collect();
        u = inner.prox(&Image::from_vec(h, w, v)?, &cfg)?;
        a.apply_into(u.as_slice(), &mut au);
        if opts.dual_update == DualUpdate::Accumulate {
            for i in 0..m {
                dual.d[i] += f[i] - au[i];
            }
        }
        dual.t += 1;
        if opts.record_trace {
            trace.push(energy_from(&u, &au, f, &cfg));
        }
    }
    Ok(OuterResult {
        u,
        energy_trace: trace,
        dual,
        alpha,
    })
}

/// Dual-first loop: `d' = d + f - AU`, `V = U + (1/alpha) A^T (2d' - d)`,
/// `U = prox(V)`, from `U^0 = 0`, `d^0 = 0`.
pub fn dual_first_outer(
    f: &[f64],
    a: &dyn ImagingOperator,
    cfg: &SolverConfig,
    inner: &dyn ProxSolver,
) -> Result<OuterResult> {
    dual_first_outer_with(f, a, cfg, inner, OuterOptions::default())
}

pub fn dual_first_outer_with(
    f: &[f64],
    a: &dyn ImagingOperator,
    cfg: &SolverConfig,
    inner: &dyn ProxSolver,
    opts: OuterOptions,
) -> Result<OuterResult> {
    let Setup { cfg, h, w } = setup(f, a, cfg)?;
    let alpha = cfg.alpha.expect("resolved");
    let m = f.len();
    let mut u = Image::zeros(h, w);
    let mut dual = DualState::new(m);
    // A U^0 = 0 without touching the operator.
    let mut au = vec![0.0; m];
    let mut trace = Vec::new();
    let mut next = vec![0.0; m];
    let mut extrap = vec![0.0; m];
    let mut step = vec![0.0; h * w];
    for _ in 0..cfg.outer_iters {
        if opts.record_trace {
            trace.push(energy_from(&u, &au, f, &cfg));
        }
        for i in 0..m {
            let raw = dual.d[i] + f[i] - au[i];
            next[i] = match opts.dual_update {
                DualUpdate::Accumulate => raw,
                DualUpdate::Penalized => 0.5 * raw,
            };
            extrap[i] = 2.0 * next[i] - dual.d[i];
        }
        a.adjoint_into(&extrap, &mut step);
        let v: Vec<f64> = u
            .as_slice()
            .iter()
            .zip(&step)
            .map(|(ui, si)| ui + si / alpha)
            .collect();
        u = inner.prox(&Image::from_vec(h, w, v)?, &cfg)?;
        a.apply_into(u.as_slice(), &mut au);
        std::mem::swap(&mut dual.d, &mut next);
        dual.t += 1;
    }
    if opts.record_trace {
        trace.push(energy_from(&u, &au, f, &cfg));
    }
    Ok(OuterResult {
        u,
        energy_trace: trace,
        dual,
        alpha,
    })
}

/// Checks a trace against `normalized_energy` at the final iterate.
pub fn final_energy(
    res: &OuterResult,
    f: &[f64],
    a: &dyn ImagingOperator,
    cfg: &SolverConfig,
) -> Result<f64> {
    normalized_energy(&res.u, f, a, cfg)
}
