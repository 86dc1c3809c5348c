use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use tvlab_core::experiment::{run_experiment, ExperimentSpec, InputSpec, Task};
use tvlab_core::AxisWeights;

/// Total-variation experiments: ROF smoothing and denoising, ultrasound
/// reconstruction, and unfolded-network training.
#[derive(Debug, Parser)]
#[command(name = "tvlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Smooth images with both ROF solvers.
    Smooth(Common),
    /// Add Gaussian noise, then smooth.
    Denoise(Common),
    /// Speed-of-sound reconstruction of Voronoi phantoms from ray delays.
    Reconstruct(Common),
    /// Train the unfolded network on random patches.
    Train(Common),
    /// Time both solvers at equal iteration counts.
    Bench(Common),
    /// Energies, runtimes and metrics of every solver side by side.
    Compare(Common),
}

impl Command {
    fn split(self) -> (Task, Common) {
        match self {
            Command::Smooth(c) => (Task::Smooth, c),
            Command::Denoise(c) => (Task::Denoise, c),
            Command::Reconstruct(c) => (Task::Reconstruct, c),
            Command::Train(c) => (Task::Train, c),
            Command::Bench(c) => (Task::Bench, c),
            Command::Compare(c) => (Task::Compare, c),
        }
    }
}

/// Flags shared by every task. Each one can also be set in the `--config`
/// file under the same name; flags win over the file.
#[derive(Debug, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
struct Common {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    inner_iters: Option<usize>,
    #[arg(long)]
    outer_iters: Option<usize>,
    /// Anisotropic TV weight on the x axis; y gets 1 - w.
    #[arg(long)]
    weight_x: Option<f64>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Input images or directories. Synthetic images when absent.
    #[arg(long = "in", num_args = 1..)]
    #[serde(rename = "in")]
    inputs: Option<Vec<PathBuf>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Network parameter file to evaluate, or to warm-start training.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Standard deviation of the added Gaussian noise, grey levels.
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Root for output directories when `--out` is not given.
    #[arg(long, env = "TVLAB_OUT", default_value = "tvlab-out")]
    #[serde(skip)]
    out_root: PathBuf,
}

impl Common {
    /// Fills every unset field from `other`.
    fn or(self, other: Common) -> Common {
        Common {
            lambda: self.lambda.or(other.lambda),
            beta: self.beta.or(other.beta),
            alpha: self.alpha.or(other.alpha),
            inner_iters: self.inner_iters.or(other.inner_iters),
            outer_iters: self.outer_iters.or(other.outer_iters),
            weight_x: self.weight_x.or(other.weight_x),
            blocks: self.blocks.or(other.blocks),
            channels: self.channels.or(other.channels),
            lr: self.lr.or(other.lr),
            batch: self.batch.or(other.batch),
            epochs: self.epochs.or(other.epochs),
            seed: self.seed.or(other.seed),
            inputs: self.inputs.or(other.inputs),
            out: self.out.or(other.out),
            params: self.params.or(other.params),
            noise_sigma: self.noise_sigma.or(other.noise_sigma),
            config: self.config,
            out_root: self.out_root,
        }
    }
}

fn read_config(path: &Path) -> Result<Common> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn build_spec(task: Task, flags: Common) -> Result<ExperimentSpec> {
    let c = match &flags.config {
        Some(path) => {
            let file = read_config(path)?;
            flags.or(file)
        }
        None => flags,
    };
    let seed = c.seed.unwrap_or(0);
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| c.out_root.join(format!("{}-seed{seed}", task.name())));
    let mut spec = ExperimentSpec::new(task, out);
    spec.seed = seed;
    let s = &mut spec.solver;
    if let Some(v) = c.lambda {
        s.lambda = v;
        spec.train.lambda = v;
    }
    if let Some(v) = c.beta {
        s.beta = v;
    }
    if c.alpha.is_some() {
        s.alpha = c.alpha;
    }
    if let Some(v) = c.inner_iters {
        s.inner_iters = v;
    }
    if let Some(v) = c.outer_iters {
        s.outer_iters = v;
    }
    if let Some(w) = c.weight_x {
        s.weights = AxisWeights::anisotropic(w)?;
        spec.train.weights = s.weights;
    }
    if let Some(v) = c.blocks {
        spec.rsnet.blocks = v;
    }
    if let Some(v) = c.channels {
        spec.rsnet.channels = v;
    }
    if let Some(v) = c.lr {
        spec.train.learning_rate = v;
    }
    if let Some(v) = c.batch {
        spec.train.batch_size = v;
    }
    if let Some(v) = c.epochs {
        spec.train.epochs = v;
    }
    if let Some(v) = c.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(paths) = c.inputs {
        if paths.is_empty() {
            bail!("--in needs at least one path");
        }
        spec.input = InputSpec::Files { paths };
    }
    spec.rsnet.params = c.params;
    spec.validate()?;
    Ok(spec)
}

fn main() -> Result<()> {
    let (task, flags) = Cli::parse().command.split();
    let spec = build_spec(task, flags)?;
    let report = run_experiment(&spec)
        .with_context(|| format!("{} run failed", task.name()))?;
    println!("{}", report.out_dir.display());
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> (Task, Common) {
        let mut full = vec!["tvlab"];
        full.extend_from_slice(args);
        Cli::try_parse_from(full).unwrap().command.split()
    }

    #[test]
    fn defaults_per_task() {
        let (task, c) = parse(&["smooth", "--out", "/tmp/x"]);
        let spec = build_spec(task, c).unwrap();
        assert_eq!(spec.solver.inner_iters, 200);
        assert_eq!(spec.solver.lambda, 10.0);
        assert_eq!(spec.out_dir, PathBuf::from("/tmp/x"));
        let (task, c) = parse(&["reconstruct", "--out", "/tmp/x"]);
        let spec = build_spec(task, c).unwrap();
        assert_eq!(spec.solver.weights, AxisWeights::anisotropic(0.9).unwrap());
    }

    #[test]
    fn flags_override_config_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        fs::write(&cfg, "lambda = 4.0\nbeta = 0.1\nepochs = 7\nout = \"/tmp/from-config\"\n").unwrap();
        let (task, c) = parse(&["train", "--config", cfg.to_str().unwrap(), "--lambda", "2.5"]);
        let spec = build_spec(task, c).unwrap();
        assert_eq!(spec.solver.lambda, 2.5);
        assert_eq!(spec.train.lambda, 2.5);
        assert_eq!(spec.solver.beta, 0.1);
        assert_eq!(spec.train.epochs, 7);
        assert_eq!(spec.train.batch_size, 64);
        assert_eq!(spec.out_dir, PathBuf::from("/tmp/from-config"));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.toml");
        fs::write(&cfg, "lamda = 4.0\n").unwrap();
        let (task, c) = parse(&["smooth", "--config", cfg.to_str().unwrap()]);
        assert!(build_spec(task, c).is_err());
    }

    #[test]
    fn out_root_names_the_run() {
        let (task, c) = parse(&["bench", "--seed", "3", "--out-root", "/data/runs"]);
        let spec = build_spec(task, c).unwrap();
        assert_eq!(spec.out_dir, PathBuf::from("/data/runs/bench-seed3"));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let (task, c) = parse(&["smooth", "--beta", "0.3", "--out", "/tmp/x"]);
        assert!(build_spec(task, c).is_err());
        let (task, c) = parse(&["reconstruct", "--weight-x", "1.5", "--out", "/tmp/x"]);
        assert!(build_spec(task, c).is_err());
    }
}
