//! Experiment drivers behind the command-line tasks.
//!
//! Every run writes into a staging directory next to `out_dir` and renames it
//! into place only after the manifest, the last file, has been written. A
//! failed run removes the staging directory.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.json              spec, seed, code version, per-task summary
//! metrics.csv                image_id,psnr,ssim,energy_fs,energy_rs,energy_rsnet,runtime_fs,runtime_rs
//! energy/<id>_<solver>.csv   iteration,normalized_energy
//! images/<id>_<tag>.png
//! ```
//!
//! `psnr` and `ssim` score the RS output against the clean reference: the
//! input itself for `smooth`, the noise-free image for `denoise`, `compare`
//! and `bench`, and the true phantom (central columns only) for
//! `reconstruct`. Runtimes are seconds without tracing or I/O.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, Error, Result};
use crate::grid::{normalized_energy, Image, SolverConfig};
use crate::io::{add_gaussian_noise, crop_patches, image_files, load_image, save_image};
use crate::metrics::MetricReport;
use crate::outer::{Identity, OuterOptions, ProxSolver};
use crate::rof::{InnerSolver, RofOptions};
use crate::rsnet::{
    load_params, mean_loss, rsnet_forward, save_params, train_rsnet_observed, RsnetParams,
    TrainConfig,
};
use crate::synthetic::{piecewise_constant, textured};
use crate::ultrasound::{
    build_ray_operator, central_region, generate_voronoi_phantom, phantom_from_values,
    reconstruct_sos, simulate_delays, write_delays_csv, write_geometry_json, Phantom,
    RayGeometry, DEFAULT_CELL_SIZE,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const METRICS_HEADER: [&str; 8] = [
    "image_id",
    "psnr",
    "ssim",
    "energy_fs",
    "energy_rs",
    "energy_rsnet",
    "runtime_fs",
    "runtime_rs",
];
pub const ENERGY_HEADER: [&str; 2] = ["iteration", "normalized_energy"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Smooth,
    Denoise,
    Reconstruct,
    Train,
    Bench,
    Compare,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Smooth => "smooth",
            Task::Denoise => "denoise",
            Task::Reconstruct => "reconstruct",
            Task::Train => "train",
            Task::Bench => "bench",
            Task::Compare => "compare",
        }
    }
}

/// Where the images (or phantoms) come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    /// Image files; directories contribute every PNG/PGM/PPM inside, sorted.
    Files { paths: Vec<PathBuf> },
    PiecewiseConstant { count: usize, height: usize, width: usize },
    Textured { count: usize, height: usize, width: usize },
    /// Voronoi phantoms with a region count drawn from `min_regions..=max_regions`.
    Phantoms {
        count: usize,
        height: usize,
        width: usize,
        min_regions: usize,
        max_regions: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsnetSpec {
    pub blocks: usize,
    pub channels: usize,
    /// Trained network to evaluate; for `train`, a warm start.
    pub params: Option<PathBuf>,
}

impl Default for RsnetSpec {
    fn default() -> Self {
        Self {
            blocks: 3,
            channels: 8,
            params: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub task: Task,
    pub input: InputSpec,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub rsnet: RsnetSpec,
    /// Gaussian noise added to clean inputs (denoise, compare, bench, train).
    pub noise_sigma: f64,
    pub patch_size: usize,
    pub patch_count: usize,
    pub bench_runs: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
}

/// ROF iteration count of the single-loop tasks.
pub const DEFAULT_ROF_ITERS: usize = 200;
pub const DEFAULT_NOISE_SIGMA: f64 = 15.0;

impl ExperimentSpec {
    /// Defaults per task: 200 ROF iterations for the image tasks, 1000 outer
    /// iterations and weights `(0.9, 0.1)` for reconstruction.
    pub fn new(task: Task, out_dir: impl Into<PathBuf>) -> Self {
        let mut solver = SolverConfig::new(10.0).expect("valid default");
        let input = match task {
            Task::Reconstruct => InputSpec::Phantoms {
                count: 5,
                height: 16,
                width: 16,
                min_regions: 2,
                max_regions: 6,
            },
            Task::Train => InputSpec::PiecewiseConstant {
                count: 10,
                height: 128,
                width: 128,
            },
            _ => InputSpec::PiecewiseConstant {
                count: 5,
                height: 128,
                width: 128,
            },
        };
        match task {
            Task::Reconstruct => {
                solver = crate::ultrasound::sos_config();
                solver.outer_iters = 1000;
            }
            _ => solver.inner_iters = DEFAULT_ROF_ITERS,
        }
        Self {
            task,
            input,
            solver,
            train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 300,
                ..TrainConfig::default()
            },
            rsnet: RsnetSpec::default(),
            noise_sigma: match task {
                Task::Smooth | Task::Reconstruct => 0.0,
                _ => DEFAULT_NOISE_SIGMA,
            },
            patch_size: 32,
            patch_count: 200,
            bench_runs: 5,
            out_dir: out_dir.into(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.task == Task::Train {
            self.train.validate()?;
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise sigma", "must be >= 0"));
        }
        if self.bench_runs == 0 {
            return Err(invalid("bench runs", "must be >= 1"));
        }
        if let InputSpec::Files { paths } = &self.input {
            if paths.is_empty() {
                return Err(Error::EmptyDataset);
            }
            for p in paths {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
        }
        if let InputSpec::Phantoms { height, width, .. } = self.input {
            // The scored central region keeps half the columns and must fit the SSIM window.
            if height < 8 || width < 16 {
                return Err(invalid(
                    "phantom size",
                    format!("{height}x{width} is below the 8x16 minimum"),
                ));
            }
        }
        if let Some(p) = &self.rsnet.params {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        Ok(())
    }
}

/// Independent seed for item `k` of stream `stream`.
pub fn derive_seed(seed: u64, stream: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * k as u128);
    rng.next_u64()
}

const STREAM_IMAGES: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_PATCHES: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_TRAIN: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub energy_fs: f64,
    pub energy_rs: f64,
    pub energy_rsnet: Option<f64>,
    pub runtime_fs: f64,
    pub runtime_rs: f64,
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub rows: Vec<MetricRow>,
    pub summary: serde_json::Value,
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.image_id.clone(),
            r.psnr.to_string(),
            r.ssim.to_string(),
            r.energy_fs.to_string(),
            r.energy_rs.to_string(),
            r.energy_rsnet.map(|e| e.to_string()).unwrap_or_default(),
            r.runtime_fs.to_string(),
            r.runtime_rs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(invalid("metrics file", format!("unexpected header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// `trace[i]` is written as iteration `i`.
pub fn write_energy_csv(trace: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ENERGY_HEADER)?;
    for (i, e) in trace.iter().enumerate() {
        w.write_record([i.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_energy_csv(path: &Path) -> Result<Vec<f64>> {
    #[derive(Deserialize)]
    struct Row {
        iteration: usize,
        normalized_energy: f64,
    }
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_path(path)?.deserialize::<Row>().enumerate() {
        let row = row?;
        if row.iteration != i {
            return Err(invalid("energy file", format!("row {i} has iteration {}", row.iteration)));
        }
        out.push(row.normalized_energy);
    }
    Ok(out)
}

struct Item {
    id: String,
    clean: Image,
}

fn load_items(spec: &ExperimentSpec) -> Result<Vec<Item>> {
    let synth = |count: usize, f: &dyn Fn(u64) -> Image, prefix: &str| {
        (0..count)
            .map(|k| Item {
                id: format!("{prefix}{k:03}"),
                clean: f(derive_seed(spec.seed, STREAM_IMAGES, k as u64)),
            })
            .collect::<Vec<_>>()
    };
    let items = match &spec.input {
        InputSpec::Files { paths } => {
            let mut files = Vec::new();
            for p in paths {
                if p.is_dir() {
                    files.extend(image_files(p)?);
                } else {
                    files.push(p.clone());
                }
            }
            files
                .iter()
                .map(|p| {
                    let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok(Item {
                        id,
                        clean: load_image(p)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        InputSpec::PiecewiseConstant { count, height, width } => {
            synth(*count, &|s| piecewise_constant(*height, *width, s), "pc")
        }
        InputSpec::Textured { count, height, width } => {
            synth(*count, &|s| textured(*height, *width, s), "tx")
        }
        InputSpec::Phantoms { .. } => {
            return Err(invalid("input", "phantom inputs only apply to reconstruct"));
        }
    };
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(items)
}

fn noisy(spec: &ExperimentSpec, k: usize, clean: &Image) -> Result<Image> {
    add_gaussian_noise(clean, spec.noise_sigma, derive_seed(spec.seed, STREAM_NOISE, k as u64))
}

struct Solved {
    u: Image,
    energy: f64,
    runtime: f64,
}

fn rof_energy_normalized(u: &Image, f: &Image, cfg: &SolverConfig) -> Result<f64> {
    let (h, w) = u.dims();
    normalized_energy(u, f.as_slice(), &Identity::new(h, w), cfg)
}

fn timed_rof(solver: InnerSolver, v: &Image, cfg: &SolverConfig) -> Result<Solved> {
    let start = Instant::now();
    let res = solver.solve(v, cfg, cfg.inner_iters, RofOptions::default())?;
    let runtime = start.elapsed().as_secs_f64();
    let energy = rof_energy_normalized(&res.u, v, cfg)?;
    Ok(Solved {
        u: res.u,
        energy,
        runtime,
    })
}

fn rof_trace(solver: InnerSolver, v: &Image, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let res = solver.solve(v, cfg, cfg.inner_iters, RofOptions::traced())?;
    let n = v.pixel_count() as f64;
    Ok(res.energy_trace.iter().map(|e| e / n).collect())
}

fn load_net(spec: &ExperimentSpec) -> Result<Option<RsnetParams>> {
    spec.rsnet.params.as_deref().map(load_params).transpose()
}

struct Stage<'a> {
    root: &'a Path,
    outputs: Vec<String>,
}

impl Stage<'_> {
    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.outputs.push(rel.to_string());
        Ok(p)
    }
}

/// Runs `spec` and returns the report; see the module docs for the layout.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunReport> {
    spec.validate()?;
    let out = &spec.out_dir;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(invalid("output directory", format!("{} is not empty", out.display())));
    }
    let name = out
        .file_name()
        .ok_or_else(|| invalid("output directory", "needs a final path component"))?
        .to_string_lossy()
        .into_owned();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;

    let started = Instant::now();
    let result = (|| {
        let mut stage = Stage {
            root: &staging,
            outputs: Vec::new(),
        };
        let (rows, summary) = match spec.task {
            Task::Smooth | Task::Denoise | Task::Compare => image_task(spec, &mut stage)?,
            Task::Bench => bench_task(spec, &mut stage)?,
            Task::Reconstruct => reconstruct_task(spec, &mut stage)?,
            Task::Train => train_task(spec, &mut stage)?,
        };
        if !rows.is_empty() {
            let p = stage.path("metrics.csv")?;
            write_metrics_csv(&rows, &p)?;
        }
        let manifest = json!({
            "code_version": CODE_VERSION,
            "task": spec.task.name(),
            "seed": spec.seed,
            "spec": spec,
            "outputs": stage.outputs,
            "summary": summary,
            "timing": { "wall_seconds": started.elapsed().as_secs_f64() },
        });
        let p = staging.join("manifest.json");
        fs::write(p, serde_json::to_string_pretty(&manifest)?)?;
        Ok((rows, summary))
    })();

    match result {
        Ok((rows, summary)) => {
            if out.exists() {
                fs::remove_dir(out)?;
            }
            fs::rename(&staging, out)?;
            Ok(RunReport {
                out_dir: out.clone(),
                rows,
                summary,
            })
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

/// Reads the spec back out of a run's manifest.
pub fn load_manifest_spec(dir: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    Ok(serde_json::from_value(value["spec"].clone())?)
}

type TaskOutput = (Vec<MetricRow>, serde_json::Value);

fn image_task(spec: &ExperimentSpec, stage: &mut Stage) -> Result<TaskOutput> {
    let cfg = &spec.solver;
    let net = load_net(spec)?;
    let add_noise = spec.task != Task::Smooth && spec.noise_sigma > 0.0;
    let mut rows = Vec::new();
    let mut input_psnr = Vec::new();
    for (k, item) in load_items(spec)?.into_iter().enumerate() {
        let id = &item.id;
        let v = if add_noise { noisy(spec, k, &item.clean)? } else { item.clean.clone() };
        let fs_out = timed_rof(InnerSolver::Fast, &v, cfg)?;
        let rs_out = timed_rof(InnerSolver::Residual, &v, cfg)?;
        for (solver, tag) in [(InnerSolver::Fast, "fs"), (InnerSolver::Residual, "rs")] {
            let trace = rof_trace(solver, &v, cfg)?;
            write_energy_csv(&trace, &stage.path(&format!("energy/{id}_{tag}.csv"))?)?;
        }
        let energy_rsnet = match &net {
            Some(p) => {
                let u = rsnet_forward(&v, p)?.0;
                save_image(&u, stage.path(&format!("images/{id}_rsnet.png"))?)?;
                Some(rof_energy_normalized(&u, &v, cfg)?)
            }
            None => None,
        };
        if add_noise {
            save_image(&v, stage.path(&format!("images/{id}_noisy.png"))?)?;
            input_psnr.push(MetricReport::compute(&v, &item.clean, None)?.psnr);
        }
        save_image(&item.clean, stage.path(&format!("images/{id}_input.png"))?)?;
        save_image(&fs_out.u, stage.path(&format!("images/{id}_fs.png"))?)?;
        save_image(&rs_out.u, stage.path(&format!("images/{id}_rs.png"))?)?;
        let m = MetricReport::compute(&rs_out.u, &item.clean, None)?;
        rows.push(MetricRow {
            image_id: id.clone(),
            psnr: m.psnr,
            ssim: m.ssim,
            energy_fs: fs_out.energy,
            energy_rs: rs_out.energy,
            energy_rsnet,
            runtime_fs: fs_out.runtime,
            runtime_rs: rs_out.runtime,
        });
    }
    let mean = |f: &dyn Fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let summary = json!({
        "images": rows.len(),
        "mean_psnr_rs": mean(&|r| r.psnr),
        "mean_input_psnr": if input_psnr.is_empty() { None } else {
            Some(input_psnr.iter().sum::<f64>() / input_psnr.len() as f64)
        },
        "mean_energy_difference_rs_minus_fs": mean(&|r| r.energy_rs - r.energy_fs),
    });
    Ok((rows, summary))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn bench_task(spec: &ExperimentSpec, _stage: &mut Stage) -> Result<TaskOutput> {
    let cfg = &spec.solver;
    let mut rows = Vec::new();
    for (k, item) in load_items(spec)?.into_iter().enumerate() {
        let v = noisy(spec, k, &item.clean)?;
        let (mut t_fs, mut t_rs) = (Vec::new(), Vec::new());
        let mut last = None;
        for run in 0..spec.bench_runs {
            // Alternate the order so neither solver always runs on a warm cache.
            let (a, b) = if run % 2 == 0 {
                let a = timed_rof(InnerSolver::Fast, &v, cfg)?;
                (a, timed_rof(InnerSolver::Residual, &v, cfg)?)
            } else {
                let b = timed_rof(InnerSolver::Residual, &v, cfg)?;
                (timed_rof(InnerSolver::Fast, &v, cfg)?, b)
            };
            t_fs.push(a.runtime);
            t_rs.push(b.runtime);
            last = Some((a, b));
        }
        let (a, b) = last.expect("bench_runs >= 1");
        let m = MetricReport::compute(&b.u, &item.clean, None)?;
        rows.push(MetricRow {
            image_id: item.id,
            psnr: m.psnr,
            ssim: m.ssim,
            energy_fs: a.energy,
            energy_rs: b.energy,
            energy_rsnet: None,
            runtime_fs: median(t_fs),
            runtime_rs: median(t_rs),
        });
    }
    let mean_fs = rows.iter().map(|r| r.runtime_fs).sum::<f64>() / rows.len() as f64;
    let mean_rs = rows.iter().map(|r| r.runtime_rs).sum::<f64>() / rows.len() as f64;
    let summary = json!({
        "images": rows.len(),
        "iterations": cfg.inner_iters,
        "runs": spec.bench_runs,
        "mean_runtime_fs": mean_fs,
        "mean_runtime_rs": mean_rs,
        "rs_over_fs": mean_rs / mean_fs,
    });
    Ok((rows, summary))
}

fn phantoms(spec: &ExperimentSpec) -> Result<Vec<(String, Phantom)>> {
    match &spec.input {
        InputSpec::Phantoms {
            count,
            height,
            width,
            min_regions,
            max_regions,
        } => {
            if min_regions > max_regions || *min_regions == 0 {
                return Err(invalid("region range", format!("{min_regions}..={max_regions}")));
            }
            (0..*count)
                .map(|k| {
                    let n = min_regions + k % (max_regions - min_regions + 1);
                    let seed = derive_seed(spec.seed, STREAM_IMAGES, k as u64);
                    let p = generate_voronoi_phantom(*height, *width, n, (0.0, 255.0), seed)?;
                    Ok((format!("ph{k:03}"), p))
                })
                .collect()
        }
        _ => load_items(spec)?
            .into_iter()
            .enumerate()
            .map(|(k, item)| {
                let seed = derive_seed(spec.seed, STREAM_IMAGES, k as u64);
                Ok((item.id, phantom_from_values(&item.clean, seed)?))
            })
            .collect(),
    }
}

fn reconstruct_task(spec: &ExperimentSpec, stage: &mut Stage) -> Result<TaskOutput> {
    let cfg = &spec.solver;
    let net = load_net(spec)?;
    let mut rows = Vec::new();
    let mut written_geometry = Vec::new();
    for (id, ph) in phantoms(spec)? {
        let (h, w) = ph.values.dims();
        let geom = RayGeometry::transmission(h, w, DEFAULT_CELL_SIZE)?;
        if !written_geometry.contains(&(h, w)) {
            write_geometry_json(&geom, &stage.path(&format!("geometry_{h}x{w}.json"))?)?;
            written_geometry.push((h, w));
        }
        let a = build_ray_operator(&geom)?;
        let f = simulate_delays(&ph, &a, 0.0, 0)?;
        write_delays_csv(&f, &stage.path(&format!("delays/{id}.csv"))?)?;

        let run = |inner: &dyn ProxSolver, opts: OuterOptions| -> Result<(crate::ultrasound::SosReconstruction, f64)> {
            let start = Instant::now();
            let r = reconstruct_sos(&f, &a, cfg, inner, opts)?;
            Ok((r, start.elapsed().as_secs_f64()))
        };
        let untraced = OuterOptions {
            record_trace: false,
            ..OuterOptions::default()
        };
        let (_, runtime_fs) = run(&InnerSolver::Fast, untraced)?;
        let (_, runtime_rs) = run(&InnerSolver::Residual, untraced)?;
        let (rec_fs, _) = run(&InnerSolver::Fast, OuterOptions::default())?;
        let (rec_rs, _) = run(&InnerSolver::Residual, OuterOptions::default())?;
        write_energy_csv(&rec_fs.energy_trace, &stage.path(&format!("energy/{id}_fs.csv"))?)?;
        write_energy_csv(&rec_rs.energy_trace, &stage.path(&format!("energy/{id}_rs.csv"))?)?;
        let energy_rsnet = match &net {
            Some(p) => {
                let rec = reconstruct_sos(&f, &a, cfg, p, OuterOptions::default())?;
                write_energy_csv(&rec.energy_trace, &stage.path(&format!("energy/{id}_rsnet.csv"))?)?;
                save_image(&rec.display, stage.path(&format!("images/{id}_rsnet.png"))?)?;
                rec.energy_trace.last().copied()
            }
            None => None,
        };
        save_image(&ph.values, stage.path(&format!("images/{id}_truth.png"))?)?;
        save_image(&rec_fs.display, stage.path(&format!("images/{id}_fs.png"))?)?;
        save_image(&rec_rs.display, stage.path(&format!("images/{id}_rs.png"))?)?;
        let region = central_region(h, w)?;
        let m = MetricReport::compute(&rec_rs.display, &ph.values, Some(region))?;
        rows.push(MetricRow {
            image_id: id,
            psnr: m.psnr,
            ssim: m.ssim,
            energy_fs: *rec_fs.energy_trace.last().expect("traced"),
            energy_rs: *rec_rs.energy_trace.last().expect("traced"),
            energy_rsnet,
            runtime_fs,
            runtime_rs,
        });
    }
    let summary = json!({
        "phantoms": rows.len(),
        "outer_iterations": cfg.outer_iters,
        "rsnet_usage": net.as_ref().map(|_| "embedded in the dual-first outer loop"),
        "mean_psnr_rs_central": rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len() as f64,
    });
    Ok((rows, summary))
}

fn train_task(spec: &ExperimentSpec, stage: &mut Stage) -> Result<TaskOutput> {
    let items = load_items(spec)?;
    let sources = items
        .iter()
        .enumerate()
        .map(|(k, it)| noisy(spec, k, &it.clean))
        .collect::<Result<Vec<_>>>()?;
    let patches = crop_patches(
        &sources,
        spec.patch_size,
        spec.patch_count,
        derive_seed(spec.seed, STREAM_PATCHES, 0),
    )?;
    if patches.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p0 = match load_net(spec)? {
        Some(p) => p,
        None => RsnetParams::random(
            spec.rsnet.blocks,
            spec.rsnet.channels,
            spec.train.lambda / spec.solver.beta,
            derive_seed(spec.seed, STREAM_INIT, 0),
        )?,
    };
    let tc = TrainConfig {
        seed: derive_seed(spec.seed, STREAM_TRAIN, 0),
        ..spec.train.clone()
    };
    let a = Identity::new(spec.patch_size, spec.patch_size);
    let report = train_rsnet_observed(&patches.train, p0, &a, &tc, |_, _| {})?;
    save_params(&report.params, &stage.path("params.rsnt")?)?;
    write_energy_csv(&report.epoch_losses, &stage.path("energy/train_loss.csv")?)?;

    let loss_cfg = tc.loss_config()?;
    let mut summary = json!({
        "train_patches": patches.train.len(),
        "validation_patches": patches.validation.len(),
        "final_train_loss": report.epoch_losses.last(),
        "parameters": report.params.param_count(),
    });
    if !patches.validation.is_empty() {
        let val = mean_loss(&report.params, &patches.validation, &a, &loss_cfg)?;
        let fs_cfg = SolverConfig {
            inner_iters: spec.solver.inner_iters,
            ..loss_cfg.clone()
        };
        let mut fs_total = 0.0;
        for p in &patches.validation {
            fs_total += timed_rof(InnerSolver::Fast, p, &fs_cfg)?.energy;
        }
        let fs_mean = fs_total / patches.validation.len() as f64;
        summary["validation_loss"] = json!(val);
        summary["validation_fs_loss"] = json!(fs_mean);
        summary["validation_ratio"] = json!(val / fs_mean);
    }
    Ok((Vec::new(), summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(2, 2, 3));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = ExperimentSpec::new(Task::Reconstruct, "/tmp/x");
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let mut spec = ExperimentSpec::new(Task::Smooth, "/tmp/never-written");
        spec.input = InputSpec::Files {
            paths: vec!["/nonexistent/a.png".into()],
        };
        assert!(matches!(run_experiment(&spec), Err(Error::MissingFile(_))));
    }
}
