//! Multi-channel 3x3 correlation, stride 1, same-size output, no bias.
//!
//! Buffers are planar: channel-major, then row-major. A kernel bank for
//! `cin -> cout` is `[cout][cin][3][3]`, so entry `(o, i, dy, dx)` sits at
//! `((o * cin + i) * 3 + dy + 1) * 3 + dx + 1` and multiplies `x[i](r + dy, c + dx)`.

use serde::{Deserialize, Serialize};

/// How pixels outside the grid are filled before correlating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Nearest in-grid pixel.
    Replicate,
    Zero,
}

#[inline]
pub fn tap(o: usize, i: usize, cin: usize, dy: isize, dx: isize) -> usize {
    ((o * cin + i) * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize
}

/// Planar `(h + 2) x (w + 2)` copy of every channel with a one-pixel border.
fn pad(x: &[f64], channels: usize, h: usize, w: usize, mode: Padding) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; channels * ph * pw];
    for k in 0..channels {
        let src = &x[k * h * w..(k + 1) * h * w];
        let dst = &mut out[k * ph * pw..(k + 1) * ph * pw];
        for r in 0..h {
            let row = &src[r * w..(r + 1) * w];
            let drow = &mut dst[(r + 1) * pw..(r + 2) * pw];
            drow[1..=w].copy_from_slice(row);
            if mode == Padding::Replicate {
                drow[0] = row[0];
                drow[w + 1] = row[w - 1];
            }
        }
        if mode == Padding::Replicate {
            dst.copy_within(pw..2 * pw, 0);
            dst.copy_within(h * pw..(h + 1) * pw, (h + 1) * pw);
        }
    }
    out
}

/// Adds the border of a padded gradient buffer back onto the pixels it was
/// copied from, then strips it.
fn unpad_add(gp: &[f64], channels: usize, h: usize, w: usize, mode: Padding, dx: &mut [f64]) {
    let (ph, pw) = (h + 2, w + 2);
    for k in 0..channels {
        let src = &gp[k * ph * pw..(k + 1) * ph * pw];
        let dst = &mut dx[k * h * w..(k + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dst[r * w + c] += src[(r + 1) * pw + c + 1];
            }
        }
        if mode == Padding::Zero {
            continue;
        }
        let clamp_r = |r: usize| r.clamp(1, h) - 1;
        let clamp_c = |c: usize| c.clamp(1, w) - 1;
        for r in 0..ph {
            for c in 0..pw {
                if r == 0 || r == ph - 1 || c == 0 || c == pw - 1 {
                    dst[clamp_r(r) * w + clamp_c(c)] += src[r * pw + c];
                }
            }
        }
    }
}

/// `out[o] += sum_i K[o][i] * x[i]`.
#[allow(clippy::too_many_arguments)]
pub fn correlate(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    mode: Padding,
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(kernel.len(), 9 * cin * cout);
    debug_assert_eq!(out.len(), cout * h * w);
    let xp = pad(x, cin, h, w, mode);
    let (ph, pw) = (h + 2, w + 2);
    for o in 0..cout {
        let dst = &mut out[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let src = &xp[i * ph * pw..(i + 1) * ph * pw];
            for dy in -1isize..=1 {
                for ddx in -1isize..=1 {
                    let k = kernel[tap(o, i, cin, dy, ddx)];
                    if k == 0.0 {
                        continue;
                    }
                    for r in 0..h {
                        let sr = (r as isize + 1 + dy) as usize;
                        let s0 = (1 + ddx) as usize;
                        let srow = &src[sr * pw + s0..sr * pw + s0 + w];
                        let drow = &mut dst[r * w..(r + 1) * w];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += k * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the input: `dx += K^T dy`.
#[allow(clippy::too_many_arguments)]
pub fn correlate_grad_input(
    dy: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    mode: Padding,
    dx: &mut [f64],
) {
    let (ph, pw) = (h + 2, w + 2);
    let mut gp = vec![0.0; cin * ph * pw];
    for o in 0..cout {
        let src = &dy[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let dst = &mut gp[i * ph * pw..(i + 1) * ph * pw];
            for ky in -1isize..=1 {
                for kx in -1isize..=1 {
                    let k = kernel[tap(o, i, cin, ky, kx)];
                    if k == 0.0 {
                        continue;
                    }
                    for r in 0..h {
                        let sr = (r as isize + 1 + ky) as usize;
                        let s0 = (1 + kx) as usize;
                        let drow = &mut dst[sr * pw + s0..sr * pw + s0 + w];
                        let grow = &src[r * w..(r + 1) * w];
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += k * g;
                        }
                    }
                }
            }
        }
    }
    unpad_add(&gp, cin, h, w, mode, dx);
}

/// Gradient with respect to the kernel: `dk[o][i][d] += sum_p dy[o](p) x[i](p + d)`.
#[allow(clippy::too_many_arguments)]
pub fn correlate_grad_kernel(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    dy: &[f64],
    cout: usize,
    mode: Padding,
    dk: &mut [f64],
) {
    let xp = pad(x, cin, h, w, mode);
    let (ph, pw) = (h + 2, w + 2);
    for o in 0..cout {
        let g = &dy[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let src = &xp[i * ph * pw..(i + 1) * ph * pw];
            for ky in -1isize..=1 {
                for kx in -1isize..=1 {
                    let mut acc = 0.0;
                    for r in 0..h {
                        let sr = (r as isize + 1 + ky) as usize;
                        let s0 = (1 + kx) as usize;
                        let srow = &src[sr * pw + s0..sr * pw + s0 + w];
                        let grow = &g[r * w..(r + 1) * w];
                        acc += srow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dk[tap(o, i, cin, ky, kx)] += acc;
                }
            }
        }
    }
}
