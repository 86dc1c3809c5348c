//! Inner ROF solvers on a single channel.
//!
//! Both solvers minimize `1/2 ||u - v||^2 + lambda_eff * TV_w(u)` through a
//! bounded dual field `b` with per-axis bounds `lambda_eff * w / beta`:
//!
//! * FastSolver: `b <- cut(grad u + b)`, then `u = v - beta * grad^T b`.
//! * Residual Solver: `b <- cut(grad v + (I - beta grad grad^T) b)`, with
//!   `grad v` hoisted out of the loop and `u` formed only once at the end.
//!
//! The two iterations produce the same sequence of `b` in exact arithmetic.
//! The residual solver is fused into a single sweep over the grid per
//! iteration, while the fast solver needs one sweep for `u` and one for `b`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Result};
use crate::grid::{adjoint_diff, cut, forward_diff, rof_energy, Image, SolverConfig, VectorField};

/// Default early-stop threshold on the fixed-point defect.
pub const EARLY_STOP_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct RofResult {
    pub u: Image,
    pub b: VectorField,
    /// `u - v = -beta * grad^T b`.
    pub residual: Image,
    /// `rof_energy` at `u = v` and after every iteration (empty when tracing is off).
    pub energy_trace: Vec<f64>,
    /// Iterations actually performed.
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RofOptions {
    pub record_trace: bool,
    /// Stop once `max |b_new - b_old|` drops to this value.
    pub early_stop: Option<f64>,
}

impl RofOptions {
    pub fn traced() -> Self {
        Self {
            record_trace: true,
            early_stop: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerSolver {
    Fast,
    Residual,
}

impl InnerSolver {
    pub fn solve(
        self,
        v: &Image,
        cfg: &SolverConfig,
        n_iters: usize,
        opts: RofOptions,
    ) -> Result<RofResult> {
        match self {
            InnerSolver::Fast => fast_solver_with(v, cfg, n_iters, opts),
            InnerSolver::Residual => residual_solver_with(v, cfg, n_iters, opts),
        }
    }

    /// Solves every channel independently and restacks the estimates.
    pub fn solve_channels(self, v: &Image, cfg: &SolverConfig, n_iters: usize) -> Result<Image> {
        if v.channels() == 1 {
            return Ok(self.solve(v, cfg, n_iters, RofOptions::default())?.u);
        }
        let planes = v
            .split_channels()
            .iter()
            .map(|p| Ok(self.solve(p, cfg, n_iters, RofOptions::default())?.u))
            .collect::<Result<Vec<_>>>()?;
        Image::from_channels(&planes)
    }

    pub fn name(self) -> &'static str {
        match self {
            InnerSolver::Fast => "fs",
            InnerSolver::Residual => "rs",
        }
    }
}

pub fn fast_solver(v: &Image, cfg: &SolverConfig, n_iters: usize) -> Result<RofResult> {
    fast_solver_with(v, cfg, n_iters, RofOptions::traced())
}

pub fn residual_solver(v: &Image, cfg: &SolverConfig, n_iters: usize) -> Result<RofResult> {
    residual_solver_with(v, cfg, n_iters, RofOptions::traced())
}

struct Plane {
    h: usize,
    w: usize,
    tx: f64,
    ty: f64,
    beta: f64,
}

impl Plane {
    fn new(v: &Image, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        v.require_single_channel()?;
        let (tx, ty) = cfg.dual_bounds();
        Ok(Self {
            h: v.height(),
            w: v.width(),
            tx,
            ty,
            beta: cfg.beta,
        })
    }

    fn reconstruct_into(&self, v: &[f64], bx: &[f64], by: &[f64], u: &mut [f64]) {
        adjoint_diff(bx, by, self.h, self.w, u);
        for (ui, vi) in u.iter_mut().zip(v) {
            *ui = vi - self.beta * *ui;
        }
    }

    /// `d(r) = (grad^T b)(r, .)` for one row.
    #[inline]
    fn div_row(&self, bx: &[f64], by: &[f64], r: usize, out: &mut [f64]) {
        let w = self.w;
        let bxr = &bx[r * w..(r + 1) * w];
        out[0] = if w > 1 { -bxr[0] } else { 0.0 };
        for c in 1..w.saturating_sub(1) {
            out[c] = bxr[c - 1] - bxr[c];
        }
        if w > 1 {
            out[w - 1] = bxr[w - 2];
        }
        if r + 1 < self.h {
            for (o, b) in out.iter_mut().zip(&by[r * w..(r + 1) * w]) {
                *o -= b;
            }
        }
        if r >= 1 {
            for (o, b) in out.iter_mut().zip(&by[(r - 1) * w..r * w]) {
                *o += b;
            }
        }
    }

    /// One in-place residual-solver sweep. Returns `max |b_new - b_old|`.
    fn rs_sweep(
        &self,
        gx: &[f64],
        gy: &[f64],
        bx: &mut [f64],
        by: &mut [f64],
        dcur: &mut Vec<f64>,
        dnext: &mut Vec<f64>,
    ) -> f64 {
        let (h, w, beta) = (self.h, self.w, self.beta);
        let mut delta: f64 = 0.0;
        self.div_row(bx, by, 0, dcur);
        for r in 0..h {
            // d(r+1) reads rows r and r+1 of b, so it must be taken before row r changes.
            if r + 1 < h {
                self.div_row(bx, by, r + 1, dnext);
            }
            let base = r * w;
            for c in 0..w - 1 {
                let i = base + c;
                let nb = cut(gx[i] + bx[i] - beta * (dcur[c + 1] - dcur[c]), self.tx);
                delta = delta.max((nb - bx[i]).abs());
                bx[i] = nb;
            }
            if r + 1 < h {
                for c in 0..w {
                    let i = base + c;
                    let nb = cut(gy[i] + by[i] - beta * (dnext[c] - dcur[c]), self.ty);
                    delta = delta.max((nb - by[i]).abs());
                    by[i] = nb;
                }
            }
            std::mem::swap(dcur, dnext);
        }
        delta
    }

    /// One fast-solver step: `u` from the current `b`, then `b` from `u`.
    fn fs_step(&self, v: &[f64], bx: &mut [f64], by: &mut [f64], u: &mut [f64]) -> f64 {
        let (h, w) = (self.h, self.w);
        self.reconstruct_into(v, bx, by, u);
        let mut delta: f64 = 0.0;
        for r in 0..h {
            let base = r * w;
            for c in 0..w - 1 {
                let i = base + c;
                let nb = cut(u[i + 1] - u[i] + bx[i], self.tx);
                delta = delta.max((nb - bx[i]).abs());
                bx[i] = nb;
            }
            if r + 1 < h {
                for c in 0..w {
                    let i = base + c;
                    let nb = cut(u[i + w] - u[i] + by[i], self.ty);
                    delta = delta.max((nb - by[i]).abs());
                    by[i] = nb;
                }
            }
        }
        delta
    }

    fn finish(
        &self,
        v: &Image,
        bx: Vec<f64>,
        by: Vec<f64>,
        energy_trace: Vec<f64>,
        iterations: usize,
    ) -> RofResult {
        let n = self.h * self.w;
        let mut residual = vec![0.0; n];
        adjoint_diff(&bx, &by, self.h, self.w, &mut residual);
        for r in residual.iter_mut() {
            *r *= -self.beta;
        }
        let u: Vec<f64> = v.as_slice().iter().zip(&residual).map(|(a, r)| a + r).collect();
        RofResult {
            u: Image::from_raw(self.h, self.w, u),
            b: VectorField::from_xy(self.h, self.w, bx, by),
            residual: Image::from_raw(self.h, self.w, residual),
            energy_trace,
            iterations,
        }
    }
}

fn trace_energy(v: &Image, u: Vec<f64>, cfg: &SolverConfig) -> f64 {
    let u = Image::from_raw(v.height(), v.width(), u);
    rof_energy(&u, v, cfg).expect("shapes agree by construction")
}

pub fn fast_solver_with(
    v: &Image,
    cfg: &SolverConfig,
    n_iters: usize,
    opts: RofOptions,
) -> Result<RofResult> {
    let plane = Plane::new(v, cfg)?;
    let n = plane.h * plane.w;
    let vs = v.as_slice();
    let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
    let mut u = vec![0.0; n];
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.reserve(n_iters + 1);
        trace.push(rof_energy(v, v, cfg)?);
    }
    let mut done = 0;
    for _ in 0..n_iters {
        let delta = plane.fs_step(vs, &mut bx, &mut by, &mut u);
        done += 1;
        if opts.record_trace {
            let mut un = vec![0.0; n];
            plane.reconstruct_into(vs, &bx, &by, &mut un);
            trace.push(trace_energy(v, un, cfg));
        }
        if opts.early_stop.is_some_and(|tol| delta <= tol) {
            break;
        }
    }
    Ok(plane.finish(v, bx, by, trace, done))
}

pub fn residual_solver_with(
    v: &Image,
    cfg: &SolverConfig,
    n_iters: usize,
    opts: RofOptions,
) -> Result<RofResult> {
    let plane = Plane::new(v, cfg)?;
    let (h, w) = (plane.h, plane.w);
    let n = h * w;
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    forward_diff(v.as_slice(), h, w, &mut gx, &mut gy);
    let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
    let (mut dcur, mut dnext) = (vec![0.0; w], vec![0.0; w]);
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.reserve(n_iters + 1);
        trace.push(rof_energy(v, v, cfg)?);
    }
    let mut done = 0;
    for _ in 0..n_iters {
        let delta = plane.rs_sweep(&gx, &gy, &mut bx, &mut by, &mut dcur, &mut dnext);
        done += 1;
        if opts.record_trace {
            let mut un = vec![0.0; n];
            plane.reconstruct_into(v.as_slice(), &bx, &by, &mut un);
            trace.push(trace_energy(v, un, cfg));
        }
        if opts.early_stop.is_some_and(|tol| delta <= tol) {
            break;
        }
    }
    Ok(plane.finish(v, bx, by, trace, done))
}

/// `u = v - beta * grad^T b` for a given dual field.
pub fn reconstruct(v: &Image, b: &VectorField, cfg: &SolverConfig) -> Result<Image> {
    let plane = Plane::new(v, cfg)?;
    check_field(v, b)?;
    let mut u = vec![0.0; plane.h * plane.w];
    plane.reconstruct_into(v.as_slice(), b.component(0), b.component(1), &mut u);
    Ok(Image::from_raw(plane.h, plane.w, u))
}

fn check_field(v: &Image, b: &VectorField) -> Result<()> {
    if b.dims() != v.dims() || b.channels() != 2 {
        return Err(shape_mismatch(
            format!("2x{}x{}", v.height(), v.width()),
            format!("{}x{}x{}", b.channels(), b.height(), b.width()),
        ));
    }
    Ok(())
}

/// `max |b - cut(grad v + (I - beta grad grad^T) b)|`; zero exactly at fixed points.
pub fn fixed_point_defect(v: &Image, b: &VectorField, cfg: &SolverConfig) -> Result<f64> {
    let plane = Plane::new(v, cfg)?;
    check_field(v, b)?;
    let (h, w) = (plane.h, plane.w);
    let n = h * w;
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    forward_diff(v.as_slice(), h, w, &mut gx, &mut gy);
    let mut bx = b.component(0).to_vec();
    let mut by = b.component(1).to_vec();
    // Entries the stencil never reads or writes carry no information.
    for r in 0..h {
        bx[r * w + w - 1] = 0.0;
    }
    by[(h - 1) * w..].fill(0.0);
    let (mut dcur, mut dnext) = (vec![0.0; w], vec![0.0; w]);
    let sweep_delta = plane.rs_sweep(&gx, &gy, &mut bx, &mut by, &mut dcur, &mut dnext);
    let dead = (0..h)
        .map(|r| b.component(0)[r * w + w - 1].abs())
        .chain(b.component(1)[(h - 1) * w..].iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    Ok(sweep_delta.max(dead))
}
