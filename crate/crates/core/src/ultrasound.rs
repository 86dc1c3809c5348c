//! Transmission ultrasound speed-of-sound model: Voronoi phantoms, straight
//! ray discretization, delay simulation and TV reconstruction.
//!
//! A phantom's region values `v` in `[0, 255]` map to a speed contrast
//! `C = v / 255 * 80 - 40` m/s around `S = 1540` m/s, and to a slowness
//! delay `U = 1 / (S + C) - 1 / S` s/m. A ray's time delay is the line
//! integral of `U` along it.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::grid::{AxisWeights, Image, SolverConfig};
use crate::metrics::Region;
use crate::outer::{
    dual_first_outer_with, estimate_operator_norm, ImagingOperator, NormStatus, OuterOptions,
    ProxSolver, SparseOperator,
};
use crate::synthetic::Voronoi;

/// Average speed of sound in tissue, m/s.
pub const SPEED: f64 = 1540.0;
/// Half-width of the contrast band, m/s.
pub const CONTRAST_SPAN: f64 = 40.0;
pub const DEFAULT_CELL_SIZE: f64 = 1e-3;
pub const DEFAULT_WEIGHT_X: f64 = 0.9;

/// Delay units per display unit near zero contrast: `U ~ -KAPPA (v - 127.5)`.
pub const KAPPA: f64 = 2.0 * CONTRAST_SPAN / (255.0 * SPEED * SPEED);

pub fn contrast_from_value(v: f64) -> f64 {
    v / 255.0 * 2.0 * CONTRAST_SPAN - CONTRAST_SPAN
}

pub fn value_from_contrast(c: f64) -> f64 {
    (c + CONTRAST_SPAN) * 255.0 / (2.0 * CONTRAST_SPAN)
}

pub fn delay_from_contrast(c: f64) -> f64 {
    1.0 / (SPEED + c) - 1.0 / SPEED
}

pub fn contrast_from_delay(u: f64) -> f64 {
    1.0 / (u + 1.0 / SPEED) - SPEED
}

/// Display map of a delay map, through the exact nonlinear conversion.
pub fn display_from_delay(delay: &Image) -> Result<Image> {
    delay.map(|u| value_from_contrast(contrast_from_delay(u)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// Region values in display units.
    pub values: Image,
    /// Speed contrast `C`, m/s.
    pub contrast: Image,
    /// Slowness delay `U`, s/m.
    pub delay: Image,
    pub regions: usize,
    pub seed: u64,
}

/// Voronoi phantom with `n` regions whose values are uniform in `value_range`.
pub fn generate_voronoi_phantom(
    height: usize,
    width: usize,
    n: usize,
    value_range: (f64, f64),
    seed: u64,
) -> Result<Phantom> {
    let (lo, hi) = value_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(invalid("value range", format!("[{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voronoi = Voronoi::generate(height, width, n, &mut rng)?;
    let dist = Uniform::new_inclusive(lo, hi).map_err(|e| invalid("value range", e.to_string()))?;
    let region_values: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    let values = voronoi.paint(&region_values);
    let contrast = values.map(contrast_from_value)?;
    if contrast.as_slice().iter().any(|&c| SPEED + c <= 0.0) {
        return Err(invalid("value range", "speed must stay positive"));
    }
    let delay = contrast.map(delay_from_contrast)?;
    Ok(Phantom {
        values,
        contrast,
        delay,
        regions: n,
        seed,
    })
}

/// Phantom from an existing display map, values in `[0, 255]`.
pub fn phantom_from_values(values: &Image, seed: u64) -> Result<Phantom> {
    values.require_single_channel()?;
    if values.as_slice().iter().any(|v| !(0.0..=255.0).contains(v)) {
        return Err(invalid("phantom values", "must lie in [0, 255]"));
    }
    let contrast = values.map(contrast_from_value)?;
    let delay = contrast.map(delay_from_contrast)?;
    let regions = values
        .as_slice()
        .iter()
        .map(|v| v.to_bits())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    Ok(Phantom {
        values: values.clone(),
        contrast,
        delay,
        regions,
        seed,
    })
}

/// Grid of square cells with straight rays from every emitter to every
/// receiver. Coordinates are in metres with the origin at the top-left grid
/// corner, `x` to the right and `y` downwards. Ray `e * R + r` joins emitter
/// `e` to receiver `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayGeometry {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
    pub emitters: Vec<(f64, f64)>,
    pub receivers: Vec<(f64, f64)>,
}

impl RayGeometry {
    /// One emitter above each column centre on the top edge and one receiver
    /// below each column centre on the bottom edge.
    pub fn transmission(height: usize, width: usize, cell_size: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("geometry", "grid must be non-empty"));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(invalid("cell size", format!("{cell_size} must be > 0")));
        }
        let xs = (0..width).map(|c| (c as f64 + 0.5) * cell_size);
        let bottom = height as f64 * cell_size;
        Ok(Self {
            height,
            width,
            cell_size,
            emitters: xs.clone().map(|x| (x, 0.0)).collect(),
            receivers: xs.map(|x| (x, bottom)).collect(),
        })
    }

    pub fn ray_count(&self) -> usize {
        self.emitters.len() * self.receivers.len()
    }

    pub fn ray(&self, index: usize) -> ((f64, f64), (f64, f64)) {
        let r = self.receivers.len();
        (self.emitters[index / r], self.receivers[index % r])
    }

    /// Length of ray `index` inside the grid.
    pub fn in_grid_length(&self, index: usize) -> f64 {
        let (p, q) = self.ray(index);
        match self.clip(p, q) {
            Some((t0, t1)) => (t1 - t0) * ((q.0 - p.0).hypot(q.1 - p.1)),
            None => 0.0,
        }
    }

    /// Parameter interval of `p + t (q - p)`, `t` in `[0, 1]`, inside the grid box.
    fn clip(&self, p: (f64, f64), q: (f64, f64)) -> Option<(f64, f64)> {
        let bounds = [
            (p.0, q.0 - p.0, self.width as f64 * self.cell_size),
            (p.1, q.1 - p.1, self.height as f64 * self.cell_size),
        ];
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for (start, delta, max) in bounds {
            if delta == 0.0 {
                if start < 0.0 || start > max {
                    return None;
                }
                continue;
            }
            let (a, b) = ((0.0 - start) / delta, (max - start) / delta);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 > t0).then_some((t0, t1))
    }

    /// Cell intersection lengths of one ray, ordered by pixel index.
    fn trace(&self, index: usize) -> Result<Vec<(usize, f64)>> {
        let (p, q) = self.ray(index);
        let length = (q.0 - p.0).hypot(q.1 - p.1);
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::DegenerateRay {
                index,
                reason: "emitter and receiver coincide".into(),
            });
        }
        let (t0, t1) = self.clip(p, q).ok_or_else(|| Error::DegenerateRay {
            index,
            reason: "ray misses the grid".into(),
        })?;
        let h = self.cell_size;
        // Grid-line crossings, then one cell per sub-segment by its midpoint.
        let mut ts = vec![t0, t1];
        for (start, delta, lines) in [(p.0, q.0 - p.0, self.width), (p.1, q.1 - p.1, self.height)] {
            if delta == 0.0 {
                continue;
            }
            for k in 0..=lines {
                let t = (k as f64 * h - start) / delta;
                if t > t0 && t < t1 {
                    ts.push(t);
                }
            }
        }
        ts.sort_by(f64::total_cmp);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for pair in ts.windows(2) {
            let seg = (pair[1] - pair[0]) * length;
            if seg <= 0.0 {
                continue;
            }
            let tm = 0.5 * (pair[0] + pair[1]);
            let x = p.0 + tm * (q.0 - p.0);
            let y = p.1 + tm * (q.1 - p.1);
            let c = ((x / h).floor() as isize).clamp(0, self.width as isize - 1) as usize;
            let r = ((y / h).floor() as isize).clamp(0, self.height as isize - 1) as usize;
            row.push((r * self.width + c, seg));
        }
        row.sort_by_key(|&(k, _)| k);
        row.dedup_by(|next, kept| {
            if next.0 == kept.0 {
                kept.1 += next.1;
                true
            } else {
                false
            }
        });
        Ok(row)
    }
}

/// Sparse imaging matrix: entry `(r, k)` is the length in metres of ray `r`
/// inside cell `k`. Rays are traced in parallel; row order is the ray order.
pub fn build_ray_operator(geom: &RayGeometry) -> Result<SparseOperator> {
    if geom.emitters.is_empty() || geom.receivers.is_empty() {
        return Err(invalid("geometry", "needs at least one emitter and one receiver"));
    }
    let rows = (0..geom.ray_count())
        .into_par_iter()
        .map(|i| geom.trace(i))
        .collect::<Result<Vec<_>>>()?;
    SparseOperator::from_rows(geom.height, geom.width, rows)
}

/// `f = A U`, plus Gaussian noise of standard deviation `noise_sigma` seconds.
pub fn simulate_delays(
    phantom: &Phantom,
    a: &dyn ImagingOperator,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(invalid("noise sigma", format!("{noise_sigma} must be >= 0")));
    }
    if a.input_dims() != phantom.delay.dims() {
        return Err(shape_mismatch(
            format!("{:?} grid", a.input_dims()),
            phantom.delay.shape_str(),
        ));
    }
    let mut f = a.apply(&phantom.delay)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| invalid("noise sigma", e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
    }
    Ok(f)
}

/// Default reconstruction settings: `lambda = 10` on the display-scaled
/// unknown and axis weights `(0.9, 0.1)`.
pub fn sos_config() -> SolverConfig {
    SolverConfig::new(10.0)
        .and_then(|c| c.with_weights(AxisWeights::anisotropic(DEFAULT_WEIGHT_X)?))
        .expect("constant config is valid")
}

#[derive(Clone, Debug)]
pub struct SosReconstruction {
    /// Estimated delay map, s/m.
    pub delay: Image,
    /// Display map of `delay`.
    pub display: Image,
    /// Normalized energy trace of the scaled problem.
    pub energy_trace: Vec<f64>,
    /// `||A^T A||` of the unscaled operator.
    pub operator_norm: f64,
}

/// Weighted-TV reconstruction with the dual-first outer loop.
///
/// The loop runs on `A / ||A||` and the unknown `U / KAPPA`, which keeps the
/// data term and `lambda` on the same scale as display-unit images.
pub fn reconstruct_sos(
    f: &[f64],
    a: &SparseOperator,
    cfg: &SolverConfig,
    inner: &dyn ProxSolver,
    opts: OuterOptions,
) -> Result<SosReconstruction> {
    let est = estimate_operator_norm(a, 1e-10, 5000, 0x7a11);
    if est.status == NormStatus::ZeroOperator {
        return Err(invalid("operator", "no ray crosses any cell"));
    }
    let s = 1.0 / est.value.sqrt();
    let an = a.scaled(s);
    let fs: Vec<f64> = f.iter().map(|x| x * s / KAPPA).collect();
    let res = dual_first_outer_with(&fs, &an, cfg, inner, opts)?;
    let delay = res.u.map(|x| x * KAPPA)?;
    let display = display_from_delay(&delay)?;
    Ok(SosReconstruction {
        delay,
        display,
        energy_trace: res.energy_trace,
        operator_norm: est.value,
    })
}

/// Metric region without the poorly covered side columns, a quarter of the
/// width on each side.
pub fn central_region(height: usize, width: usize) -> Result<Region> {
    Region::without_side_columns(height, width, width / 4)
}

pub fn write_geometry_json(geom: &RayGeometry, path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, geom)?;
    Ok(())
}

pub fn write_delays_csv(f: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["ray_index", "delay_seconds"])?;
    for (i, d) in f.iter().enumerate() {
        w.write_record([i.to_string(), format!("{d:e}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_delays_csv(path: &Path) -> Result<Vec<f64>> {
    #[derive(Deserialize)]
    struct Row {
        ray_index: usize,
        delay_seconds: f64,
    }
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_path(path)?.deserialize::<Row>().enumerate() {
        let row = row?;
        if row.ray_index != i {
            return Err(invalid("delay file", format!("row {i} has ray index {}", row.ray_index)));
        }
        out.push(row.delay_seconds);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rof::InnerSolver;

    fn single_ray(h: usize, w: usize, p: (f64, f64), q: (f64, f64)) -> RayGeometry {
        RayGeometry {
            height: h,
            width: w,
            cell_size: 1.0,
            emitters: vec![p],
            receivers: vec![q],
        }
    }

    #[test]
    fn conversions_round_trip() {
        for v in [0.0, 50.0, 127.5, 255.0] {
            let c = contrast_from_value(v);
            let u = delay_from_contrast(c);
            assert!((value_from_contrast(contrast_from_delay(u)) - v).abs() < 1e-9);
        }
        assert_eq!(contrast_from_value(0.0), -40.0);
        assert_eq!(contrast_from_value(255.0), 40.0);
        assert_eq!(delay_from_contrast(0.0), 0.0);
    }

    #[test]
    fn one_region_is_constant() {
        let p = generate_voronoi_phantom(8, 8, 1, (0.0, 255.0), 3).unwrap();
        let v0 = p.values.get(0, 0);
        assert!(p.values.as_slice().iter().all(|&v| v == v0));
        assert!(p.delay.as_slice().iter().all(|&u| u == delay_from_contrast(contrast_from_value(v0))));
    }

    #[test]
    fn phantom_is_a_voronoi_map() {
        let p = generate_voronoi_phantom(10, 12, 3, (0.0, 255.0), 7).unwrap();
        // Replay the generator's draws: seeds, then region values.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vor = Voronoi::generate(10, 12, 3, &mut rng).unwrap();
        let dist = Uniform::new_inclusive(0.0, 255.0).unwrap();
        let values: Vec<f64> = (0..3).map(|_| dist.sample(&mut rng)).collect();
        for r in 0..10 {
            for c in 0..12 {
                let k = crate::synthetic::nearest_seed(&vor.seeds, c as f64 + 0.5, r as f64 + 0.5);
                assert_eq!(p.values.get(r, c), values[k]);
            }
        }
        let distinct: std::collections::BTreeSet<u64> =
            p.delay.as_slice().iter().map(|u| u.to_bits()).collect();
        assert!(distinct.len() <= 3);
    }

    #[test]
    fn phantoms_are_seeded() {
        let a = generate_voronoi_phantom(32, 32, 5, (0.0, 255.0), 1).unwrap();
        assert_eq!(a, generate_voronoi_phantom(32, 32, 5, (0.0, 255.0), 1).unwrap());
        assert_ne!(a, generate_voronoi_phantom(32, 32, 5, (0.0, 255.0), 2).unwrap());
        assert!(generate_voronoi_phantom(2, 2, 5, (0.0, 255.0), 1).is_err());
    }

    #[test]
    fn vertical_ray_visits_each_row_once() {
        let h = 2e-3;
        let g = RayGeometry {
            height: 5,
            width: 3,
            cell_size: h,
            emitters: vec![(1.5 * h, 0.0)],
            receivers: vec![(1.5 * h, 5.0 * h)],
        };
        let a = build_ray_operator(&g).unwrap();
        let row: Vec<(usize, f64)> = a.row(0).collect();
        assert_eq!(row.len(), 5);
        for (r, &(k, v)) in row.iter().enumerate() {
            assert_eq!(k, r * 3 + 1);
            assert!((v - h).abs() < 1e-15);
        }
        assert!((a.row_sum(0) - 5.0 * h).abs() < 1e-15);
    }

    #[test]
    fn row_sums_are_in_grid_lengths() {
        let g = RayGeometry::transmission(12, 9, DEFAULT_CELL_SIZE).unwrap();
        let a = build_ray_operator(&g).unwrap();
        assert_eq!(a.rows(), 81);
        for r in 0..a.rows() {
            let len = g.in_grid_length(r);
            assert!((a.row_sum(r) - len).abs() <= 1e-9 * len);
        }
        // A ray starting outside the box is clipped to its in-grid part.
        let g = single_ray(4, 4, (-2.0, 1.0), (6.0, 3.0));
        let a = build_ray_operator(&g).unwrap();
        assert!((a.row_sum(0) - 17f64.sqrt()).abs() < 1e-12);
    }

    /// Midpoint-rule line integral of each cell's indicator with `samples` points.
    fn quadrature(g: &RayGeometry, samples: usize) -> Vec<f64> {
        let (p, q) = g.ray(0);
        let len = (q.0 - p.0).hypot(q.1 - p.1);
        let mut out = vec![0.0; g.height * g.width];
        for i in 0..samples {
            let t = (i as f64 + 0.5) / samples as f64;
            let (x, y) = (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1));
            let (c, r) = ((x / g.cell_size).floor(), (y / g.cell_size).floor());
            if c >= 0.0 && r >= 0.0 && (c as usize) < g.width && (r as usize) < g.height {
                out[r as usize * g.width + c as usize] += len / samples as f64;
            }
        }
        out
    }

    #[test]
    fn diagonal_ray_matches_quadrature() {
        let g = single_ray(4, 4, (0.0, 0.0), (4.0, 4.0));
        let a = build_ray_operator(&g).unwrap().to_dense();
        let oracle = quadrature(&g, 10_000);
        for (k, (&got, &want)) in a[0].iter().zip(&oracle).enumerate() {
            assert!((got - want).abs() <= 1e-6 * want.max(1e-300) + 1e-12, "cell {k}: {got} vs {want}");
        }
        // An oblique ray; each boundary shifts at most one sample step.
        let g = single_ray(4, 4, (0.3, 0.0), (3.1, 4.0));
        let a = build_ray_operator(&g).unwrap().to_dense();
        let oracle = quadrature(&g, 10_000);
        let step = (2.8f64.hypot(4.0)) / 10_000.0;
        for (got, want) in a[0].iter().zip(&oracle) {
            assert!((got - want).abs() <= 2.0 * step);
        }
    }

    #[test]
    fn degenerate_rays_are_rejected() {
        let g = single_ray(3, 3, (1.0, 1.0), (1.0, 1.0));
        assert!(matches!(build_ray_operator(&g), Err(Error::DegenerateRay { index: 0, .. })));
        let g = single_ray(3, 3, (-1.0, -1.0), (-1.0, 5.0));
        assert!(matches!(build_ray_operator(&g), Err(Error::DegenerateRay { .. })));
    }

    #[test]
    fn constant_delay_gives_scaled_lengths() {
        let g = RayGeometry::transmission(6, 6, DEFAULT_CELL_SIZE).unwrap();
        let a = build_ray_operator(&g).unwrap();
        let mut p = generate_voronoi_phantom(6, 6, 1, (0.0, 0.0), 0).unwrap();
        let u = p.delay.get(0, 0);
        let f = simulate_delays(&p, &a, 0.0, 0).unwrap();
        for (r, fr) in f.iter().enumerate() {
            assert!((fr - u * g.in_grid_length(r)).abs() <= 1e-12 * fr.abs());
        }
        p.delay = Image::zeros(6, 6);
        assert!(simulate_delays(&p, &a, 0.0, 0).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn noise_statistics() {
        let g = RayGeometry::transmission(4, 100, DEFAULT_CELL_SIZE).unwrap();
        let a = build_ray_operator(&g).unwrap();
        assert_eq!(a.rows(), 10_000);
        let p = generate_voronoi_phantom(4, 100, 4, (0.0, 255.0), 2).unwrap();
        let clean = simulate_delays(&p, &a, 0.0, 0).unwrap();
        let sigma = 1e-8;
        let noisy = simulate_delays(&p, &a, sigma, 9).unwrap();
        let e: Vec<f64> = noisy.iter().zip(&clean).map(|(x, y)| x - y).collect();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let sd = (e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e.len() as f64).sqrt();
        assert!(mean.abs() <= 3.0 * sigma / 100.0);
        assert!((sd - sigma).abs() <= 0.05 * sigma);
        assert_eq!(noisy, simulate_delays(&p, &a, sigma, 9).unwrap());
    }

    #[test]
    fn zero_observations_reconstruct_to_zero_delay() {
        let g = RayGeometry::transmission(8, 8, DEFAULT_CELL_SIZE).unwrap();
        let a = build_ray_operator(&g).unwrap();
        let mut cfg = sos_config();
        cfg.outer_iters = 5;
        let rec = reconstruct_sos(&vec![0.0; a.rows()], &a, &cfg, &InnerSolver::Residual, OuterOptions::default()).unwrap();
        assert!(rec.delay.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_phantom_is_recovered_centrally() {
        let g = RayGeometry::transmission(12, 12, DEFAULT_CELL_SIZE).unwrap();
        let a = build_ray_operator(&g).unwrap();
        let p = generate_voronoi_phantom(12, 12, 1, (0.0, 255.0), 4).unwrap();
        let f = simulate_delays(&p, &a, 0.0, 0).unwrap();
        let mut cfg = sos_config();
        cfg.outer_iters = 400;
        let rec = reconstruct_sos(&f, &a, &cfg, &InnerSolver::Residual, OuterOptions::default()).unwrap();
        let region = central_region(12, 12).unwrap();
        let got = region.crop(&rec.delay).unwrap();
        let want = region.crop(&p.delay).unwrap();
        for (x, y) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((x - y).abs() <= 0.01 * y.abs(), "{x} vs {y}");
        }
    }

    #[test]
    fn exports_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = RayGeometry::transmission(3, 4, DEFAULT_CELL_SIZE).unwrap();
        write_geometry_json(&g, &dir.path().join("geometry.json")).unwrap();
        let back: RayGeometry =
            serde_json::from_reader(File::open(dir.path().join("geometry.json")).unwrap()).unwrap();
        assert_eq!(back, g);
        let f = vec![1.25e-7, -3.0e-9, 0.0];
        let path = dir.path().join("delays.csv");
        write_delays_csv(&f, &path).unwrap();
        assert_eq!(read_delays_csv(&path).unwrap(), f);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ray_index,delay_seconds\n0,"));
    }
}
