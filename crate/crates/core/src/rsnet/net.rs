use crate::conv::{correlate, correlate_grad_input, correlate_grad_kernel};
use crate::error::{invalid, shape_mismatch, Result};
use crate::grid::{adjoint_diff, forward_diff, normalized_energy, Image, SolverConfig};
use crate::outer::{dual_first_outer_with, ImagingOperator, OuterOptions, ProxSolver};

use super::{Boundary, RsnetParams};

/// Intermediates of one forward pass, consumed by [`rsnet_backward`].
#[derive(Clone, Debug)]
pub struct Tape<'a> {
    params: &'a RsnetParams,
    height: usize,
    width: usize,
    v: Vec<f64>,
    /// Pre-activations `g + K_j * b_{j-1}`, one buffer per block.
    z: Vec<Vec<f64>>,
    /// Post-activation fields `b_j`, one buffer per block.
    b: Vec<Vec<f64>>,
    u: Image,
}

impl<'a> Tape<'a> {
    pub fn output(&self) -> &Image {
        &self.u
    }

    pub fn params(&self) -> &'a RsnetParams {
        self.params
    }

    /// Pre-activation of block `j` (0-based), `C` planes.
    pub fn pre_activation(&self, j: usize) -> &[f64] {
        &self.z[j]
    }

    /// Field `b_{j+1}` leaving block `j` (0-based).
    pub fn field(&self, j: usize) -> &[f64] {
        &self.b[j]
    }
}

fn masked(boundary: Boundary, k: usize, r: usize, c: usize, h: usize, w: usize) -> bool {
    match boundary {
        Boundary::Replicate => false,
        Boundary::Grid if k % 2 == 0 => c + 1 == w,
        Boundary::Grid => r + 1 == h,
    }
}

fn apply_mask(buf: &mut [f64], channels: usize, h: usize, w: usize, boundary: Boundary) {
    if boundary == Boundary::Replicate {
        return;
    }
    for k in 0..channels {
        let plane = &mut buf[k * h * w..(k + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                if masked(boundary, k, r, c, h, w) {
                    plane[r * w + c] = 0.0;
                }
            }
        }
    }
}

/// Runs the network on a single-channel image.
pub fn rsnet_forward<'a>(v: &Image, p: &'a RsnetParams) -> Result<(Image, Tape<'a>)> {
    v.require_single_channel()?;
    let (h, w) = v.dims();
    let c = p.channels();
    let n = h * w;
    let pad = p.boundary().padding();
    let theta = p.clip();

    let mut g = vec![0.0; c * n];
    correlate(v.as_slice(), 1, h, w, p.input_kernel(), c, pad, &mut g);

    let mut zs = Vec::with_capacity(p.blocks());
    let mut bs: Vec<Vec<f64>> = Vec::with_capacity(p.blocks());
    for j in 0..p.blocks() {
        let mut z = g.clone();
        if let Some(prev) = bs.last() {
            correlate(prev, c, h, w, p.block_kernel(j), c, pad, &mut z);
        }
        let mut b: Vec<f64> = z.iter().map(|x| x.clamp(-theta, theta)).collect();
        apply_mask(&mut b, c, h, w, p.boundary());
        zs.push(z);
        bs.push(b);
    }

    let mut u = v.as_slice().to_vec();
    correlate(bs.last().expect("blocks >= 1"), c, h, w, p.output_kernel(), 1, pad, &mut u);
    let u = Image::from_vec(h, w, u)?;
    let tape = Tape {
        params: p,
        height: h,
        width: w,
        v: v.as_slice().to_vec(),
        z: zs,
        b: bs,
        u: u.clone(),
    };
    Ok((u, tape))
}

/// The unsupervised training loss: `normalized_energy(u, f, A, cfg)`.
pub fn rsnet_loss(
    u: &Image,
    f: &[f64],
    a: &dyn ImagingOperator,
    cfg: &SolverConfig,
) -> Result<f64> {
    normalized_energy(u, f, a, cfg)
}

/// Gradient of [`rsnet_loss`] at the tape's output with respect to the
/// output image: `(A^T (Au - f) + lambda grad^T (w . sign(grad u))) / N`.
fn loss_gradient(
    u: &Image,
    f: &[f64],
    a: &dyn ImagingOperator,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let (h, w) = u.dims();
    let n = h * w;
    if a.input_dims() != (h, w) {
        return Err(shape_mismatch(
            format!("{}x{} operator input", a.input_dims().0, a.input_dims().1),
            u.shape_str(),
        ));
    }
    if f.len() != a.output_len() {
        return Err(shape_mismatch(
            format!("{} observations", a.output_len()),
            format!("{} observations", f.len()),
        ));
    }
    let mut resid = a.apply(u)?;
    for (r, fi) in resid.iter_mut().zip(f) {
        *r -= fi;
    }
    let mut du = vec![0.0; n];
    a.adjoint_into(&resid, &mut du);

    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    forward_diff(u.as_slice(), h, w, &mut gx, &mut gy);
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let sx: Vec<f64> = gx.iter().map(|&x| cfg.lambda * cfg.weights.x * sign(x)).collect();
    let sy: Vec<f64> = gy.iter().map(|&y| cfg.lambda * cfg.weights.y * sign(y)).collect();
    let mut tv = vec![0.0; n];
    adjoint_diff(&sx, &sy, h, w, &mut tv);

    let scale = 1.0 / n as f64;
    Ok(du.iter().zip(&tv).map(|(d, t)| (d + t) * scale).collect())
}

/// Reverse-mode gradient of [`rsnet_loss`] with respect to every kernel
/// entry. The clip derivative is 1 strictly inside `(-theta, theta)` and 0
/// elsewhere, and TV uses `sign(0) = 0`.
pub fn rsnet_backward(
    tape: &Tape<'_>,
    f: &[f64],
    a: &dyn ImagingOperator,
    cfg: &SolverConfig,
) -> Result<RsnetParams> {
    let p = tape.params;
    let (h, w) = (tape.height, tape.width);
    let c = p.channels();
    let pad = p.boundary().padding();
    let theta = p.clip();
    let mut grads = p.zeros_like();

    let du = loss_gradient(&tape.u, f, a, cfg)?;
    let last = tape.b.last().expect("blocks >= 1");
    correlate_grad_kernel(last, c, h, w, &du, 1, pad, grads.output_kernel_mut());
    let mut db = vec![0.0; c * h * w];
    correlate_grad_input(&du, c, h, w, p.output_kernel(), 1, pad, &mut db);

    let mut dg = vec![0.0; c * h * w];
    for j in (0..p.blocks()).rev() {
        let z = &tape.z[j];
        let mut dz = db;
        for k in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let i = k * h * w + r * w + col;
                    if masked(p.boundary(), k, r, col, h, w) || z[i].abs() >= theta {
                        dz[i] = 0.0;
                    }
                }
            }
        }
        for (g, d) in dg.iter_mut().zip(&dz) {
            *g += d;
        }
        db = vec![0.0; c * h * w];
        if j > 0 {
            let prev = &tape.b[j - 1];
            correlate_grad_kernel(prev, c, h, w, &dz, c, pad, grads.block_kernel_mut(j));
            correlate_grad_input(&dz, c, h, w, p.block_kernel(j), c, pad, &mut db);
        }
    }
    correlate_grad_kernel(&tape.v, 1, h, w, &dg, c, pad, grads.input_kernel_mut());
    Ok(grads)
}

/// The network as the inner solver of an outer loop. Its clip threshold is
/// fixed at construction, so only the input image is used.
impl ProxSolver for RsnetParams {
    fn prox(&self, v: &Image, _cfg: &SolverConfig) -> Result<Image> {
        Ok(rsnet_forward(v, self)?.0)
    }
}

/// The dual-first outer loop unrolled for `outer_blocks` steps with the
/// network in place of the inner solver, from `U^0 = 0`, `d^0 = 0`.
pub fn full_net_forward(
    f: &[f64],
    a: &dyn ImagingOperator,
    p: &RsnetParams,
    cfg: &SolverConfig,
    outer_blocks: usize,
    opts: OuterOptions,
) -> Result<Image> {
    if outer_blocks == 0 {
        return Err(invalid("outer blocks", "must be >= 1"));
    }
    let cfg = SolverConfig {
        outer_iters: outer_blocks,
        ..cfg.clone()
    };
    let opts = OuterOptions {
        record_trace: false,
        ..opts
    };
    Ok(dual_first_outer_with(f, a, &cfg, p, opts)?.u)
}

#[cfg(test)]
mod tests {
    use super::super::{kernels_from_rs, DEFAULT_CLIP};
    use super::*;
    use crate::grid::{gradient, AxisWeights};
    use crate::outer::{dual_first_outer_with, resolve_alpha, DualUpdate, Identity};
    use crate::rof::{residual_solver, InnerSolver};
    use crate::synthetic::piecewise_constant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| rng.random_range(0.0..255.0))
    }

    fn uniform_params(b: usize, c: usize, clip: f64, range: f64, seed: u64) -> RsnetParams {
        let mut p = RsnetParams::zeros(b, c, clip, Boundary::Replicate).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-range..range));
        p
    }

    #[test]
    fn zero_output_kernel_is_identity() {
        let mut p = uniform_params(3, 4, 5.0, 0.3, 1);
        p.output_kernel_mut().fill(0.0);
        let v = random_image(7, 9, 2);
        let (u, _) = rsnet_forward(&v, &p).unwrap();
        assert_eq!(u, v);
    }

    #[test]
    fn random_net_output_is_finite() {
        let p = uniform_params(4, 6, DEFAULT_CLIP, 0.1, 3);
        let v = random_image(16, 16, 4);
        let (u, tape) = rsnet_forward(&v, &p).unwrap();
        assert_eq!(u.dims(), (16, 16));
        assert!(u.as_slice().iter().all(|x| x.is_finite()));
        assert_eq!(tape.pre_activation(3).len(), 6 * 256);
    }

    #[test]
    fn rejects_multichannel_input() {
        let p = uniform_params(1, 2, 1.0, 0.1, 0);
        let v = Image::new(2, 2, 2, vec![0.0; 8]).unwrap();
        assert!(rsnet_forward(&v, &p).is_err());
    }

    #[test]
    fn rs_kernels_match_residual_solver() {
        for (blocks, weights) in [
            (1, AxisWeights::unweighted()),
            (10, AxisWeights::unweighted()),
            (40, AxisWeights::anisotropic(0.9).unwrap()),
        ] {
            let cfg = SolverConfig::new(10.0).unwrap().with_weights(weights).unwrap();
            let p = kernels_from_rs(cfg.lambda_eff(), cfg.beta, weights, blocks).unwrap();
            let v = random_image(9, 11, blocks as u64);
            let (u, _) = rsnet_forward(&v, &p).unwrap();
            let want = residual_solver(&v, &cfg, blocks).unwrap().u;
            assert!(u.max_abs_diff(&want) <= 1e-10, "B={blocks}: {}", u.max_abs_diff(&want));
        }
    }

    #[test]
    fn rs_kernels_single_step_by_hand() {
        // v = [0, 1, 2] on a 1x3 grid, lambda = 10, beta = 0.2, one step:
        // grad_x v = [1, 1, 0], all inside the bound 50, so b = [1, 1, 0];
        // grad^T b = [-1, 0, 1], u = v - 0.2 grad^T b = [0.2, 1, 1.8].
        let p = kernels_from_rs(10.0, 0.2, AxisWeights::unweighted(), 1).unwrap();
        let v = Image::from_vec(1, 3, vec![0.0, 1.0, 2.0]).unwrap();
        let (u, _) = rsnet_forward(&v, &p).unwrap();
        for (got, want) in u.as_slice().iter().zip([0.2, 1.0, 1.8]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn rs_kernels_keep_constants() {
        let p = kernels_from_rs(3.0, 0.2, AxisWeights::unweighted(), 5).unwrap();
        let v = Image::filled(6, 5, 42.0);
        assert_eq!(rsnet_forward(&v, &p).unwrap().0, v);
    }

    #[test]
    fn loss_delegates_to_normalized_energy() {
        let cfg = SolverConfig::new(10.0).unwrap();
        let a = Identity::new(8, 8);
        let u = random_image(8, 8, 5);
        let f = random_image(8, 8, 6);
        let got = rsnet_loss(&u, f.as_slice(), &a, &cfg).unwrap();
        // Direct formula.
        let g = gradient(&u).unwrap();
        let tv: f64 = g.as_slice().iter().map(|x| x.abs()).sum();
        let fid: f64 = u.as_slice().iter().zip(f.as_slice()).map(|(x, y)| 0.5 * (x - y) * (x - y)).sum();
        assert!((got - (fid + 10.0 * tv) / 64.0).abs() < 1e-9);
        let flat = Image::filled(8, 8, 3.0);
        assert_eq!(rsnet_loss(&flat, flat.as_slice(), &a, &cfg).unwrap(), 0.0);
    }

    fn loss_at(p: &RsnetParams, v: &Image, a: &Identity, cfg: &SolverConfig) -> f64 {
        let (u, _) = rsnet_forward(v, p).unwrap();
        rsnet_loss(&u, v.as_slice(), a, cfg).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (h, w) = (6, 6);
        let clip = 2.0;
        let p = uniform_params(2, 3, clip, 0.3, 11);
        let v = random_image(h, w, 12).map(|x| x / 50.0).unwrap();
        let a = Identity::new(h, w);
        let cfg = SolverConfig::new(0.7).unwrap();
        let (_, tape) = rsnet_forward(&v, &p).unwrap();
        for j in 0..p.blocks() {
            let margin = tape.pre_activation(j).iter().map(|z| (z.abs() - clip).abs()).fold(f64::INFINITY, f64::min);
            assert!(margin > 1e-3, "pre-activation too close to the clip: {margin}");
        }
        let grads = rsnet_backward(&tape, v.as_slice(), &a, &cfg).unwrap();
        let step = 1e-4;
        for i in 0..p.param_count() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += step;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= step;
            let fd = (loss_at(&plus, &v, &a, &cfg) - loss_at(&minus, &v, &a, &cfg)) / (2.0 * step);
            let an = grads.as_slice()[i];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "param {i}: analytic {an}, fd {fd}");
        }
    }

    #[test]
    fn gradient_grid_boundary_matches_finite_differences() {
        let mut p = uniform_params(2, 2, 3.0, 0.3, 21);
        p = RsnetParams::from_weights(2, 2, 3.0, Boundary::Grid, p.as_slice().to_vec()).unwrap();
        let v = random_image(5, 4, 22).map(|x| x / 60.0).unwrap();
        let a = Identity::new(5, 4);
        let cfg = SolverConfig::new(0.5).unwrap();
        let (_, tape) = rsnet_forward(&v, &p).unwrap();
        let grads = rsnet_backward(&tape, v.as_slice(), &a, &cfg).unwrap();
        for i in 0..p.param_count() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += 1e-5;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= 1e-5;
            let fd = (loss_at(&plus, &v, &a, &cfg) - loss_at(&minus, &v, &a, &cfg)) / 2e-5;
            assert!((fd - grads.as_slice()[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {i}");
        }
    }

    #[test]
    fn output_kernel_gradient_at_identity_is_tv_only() {
        let mut p = uniform_params(2, 3, 50.0, 0.2, 31);
        p.output_kernel_mut().fill(0.0);
        let v = random_image(6, 6, 32);
        let a = Identity::new(6, 6);
        let (_, tape) = rsnet_forward(&v, &p).unwrap();
        let cfg0 = SolverConfig::new(0.0).unwrap();
        let g0 = rsnet_backward(&tape, v.as_slice(), &a, &cfg0).unwrap();
        assert!(g0.as_slice().iter().all(|&x| x == 0.0));

        let cfg = SolverConfig::new(2.0).unwrap();
        let g = rsnet_backward(&tape, v.as_slice(), &a, &cfg).unwrap();
        let cfg2 = SolverConfig::new(4.0).unwrap();
        let g2 = rsnet_backward(&tape, v.as_slice(), &a, &cfg2).unwrap();
        for (x, y) in g.as_slice().iter().zip(g2.as_slice()) {
            assert_eq!(2.0 * x, *y);
        }
        for i in 0..9 * 3 {
            let idx = p.param_count() - 27 + i;
            let mut plus = p.clone();
            plus.as_mut_slice()[idx] += 1e-6;
            let mut minus = p.clone();
            minus.as_mut_slice()[idx] -= 1e-6;
            let fd = (loss_at(&plus, &v, &a, &cfg) - loss_at(&minus, &v, &a, &cfg)) / 2e-6;
            assert!((fd - g.as_slice()[idx]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {}", g.as_slice()[idx]);
        }
    }

    #[test]
    fn full_net_of_zero_is_zero() {
        let p = uniform_params(2, 3, 5.0, 0.2, 41);
        let cfg = SolverConfig::new(10.0).unwrap();
        let a = Identity::new(5, 5);
        let u = full_net_forward(&[0.0; 25], &a, &p, &cfg, 3, OuterOptions::default()).unwrap();
        assert!(u.as_slice().iter().all(|&x| x == 0.0));
        assert!(full_net_forward(&[0.0; 25], &a, &p, &cfg, 0, OuterOptions::default()).is_err());
    }

    #[test]
    fn full_net_one_block_is_one_composition() {
        // U^0 = 0, d^0 = 0: d^1 = f, V^1 = (2/alpha) A^T f, U^1 = net(V^1).
        let p = uniform_params(2, 3, 5.0, 0.2, 51);
        let f = random_image(6, 6, 52);
        let a = Identity::new(6, 6);
        let alpha = 1000.0;
        let cfg = SolverConfig::new(10.0).unwrap().with_alpha(alpha).unwrap();
        let got = full_net_forward(f.as_slice(), &a, &p, &cfg, 1, OuterOptions::default()).unwrap();
        let v1 = f.map(|x| 2.0 * x / alpha).unwrap();
        let want = rsnet_forward(&v1, &p).unwrap().0;
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn full_net_with_rs_kernels_matches_outer_loop() {
        let f = piecewise_constant(12, 12, 61);
        let a = Identity::new(12, 12);
        let mut cfg = SolverConfig::new(10.0).unwrap();
        cfg.inner_iters = 30;
        cfg.outer_iters = 60;
        let alpha = resolve_alpha(&a, &cfg).unwrap();
        let resolved = SolverConfig {
            alpha: Some(alpha),
            ..cfg.clone()
        };
        let p = kernels_from_rs(resolved.lambda_eff(), cfg.beta, cfg.weights, cfg.inner_iters).unwrap();
        for update in [DualUpdate::Accumulate, DualUpdate::Penalized] {
            let opts = OuterOptions {
                dual_update: update,
                record_trace: false,
            };
            let got = full_net_forward(f.as_slice(), &a, &p, &cfg, cfg.outer_iters, opts).unwrap();
            let want = dual_first_outer_with(f.as_slice(), &a, &cfg, &InnerSolver::Residual, opts).unwrap().u;
            assert!(got.max_abs_diff(&want) <= 1e-3, "{update:?}: {}", got.max_abs_diff(&want));
        }
    }
}
