//! Flat run configuration. Every key can come from a TOML file and be
//! overridden by a flag of the same name (`learning_rate` ↔
//! `--learning-rate`). Unknown keys are rejected in both places.

use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use grain_core::coarsen::CoarsenConfig;
use grain_core::grainstats::Threshold;
use grain_core::grid_gnn::{Activation, Aggregation, Connectivity};
use grain_core::lattice_mc::{McConfig, Neighborhood};
use grain_core::rollout::{Algorithm, RolloutConfig};
use grain_core::trainer::TrainConfig;
use grain_core::ModelConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub parallel: bool,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    pub dims: Vec<usize>,
    pub num_trajectories: usize,
    pub num_labels: u32,
    pub kt: f64,
    pub coupling: f64,
    pub neighborhood: Neighborhood,
    pub sweeps_per_frame: usize,
    pub num_frames: usize,
    pub warmup_sweeps: usize,
    pub downsample: usize,
    pub gaussian_sigma: f64,
    pub temporal_window: usize,

    pub ratio: usize,
    pub hidden: usize,
    pub layers: usize,
    pub activation: Activation,
    pub connectivity: Connectivity,
    pub aggregation: Aggregation,
    pub condition_bound: f64,

    pub horizon: usize,
    pub noise_amplitude: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_learning_rate: f64,
    pub augment: bool,
    pub val_fraction: f64,
    pub stop_after: usize,
    pub resume: bool,

    pub checkpoint: String,
    pub input: String,
    pub input_frame: usize,
    pub reference: String,
    pub output: String,
    pub algorithm: Algorithm,
    pub steps: usize,
    pub emit_every: usize,
    pub divergence_threshold: f64,
    pub strict: bool,
    pub verify_parity: bool,

    pub predicted: String,
    pub truth: String,
    pub threshold: String,
    pub min_size: usize,
    pub plots: bool,

    pub bench_meshes: Vec<usize>,
    pub bench_ratios: Vec<usize>,
    pub bench_ndim: usize,
    pub bench_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mc = McConfig::fine_grained(&[128, 128], 20, 25, 0);
        let coarsen = CoarsenConfig::default();
        let model = ModelConfig::new(2, 4, 32, 3);
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            parallel: true,
            data_dir: "data".into(),
            out_dir: "out".into(),

            dims: mc.dims,
            num_trajectories: 32,
            num_labels: 0,
            kt: mc.kt,
            coupling: mc.coupling,
            neighborhood: mc.neighborhood,
            sweeps_per_frame: mc.sweeps_per_frame,
            num_frames: mc.num_frames,
            warmup_sweeps: 100,
            downsample: coarsen.downsample,
            gaussian_sigma: coarsen.gaussian_sigma,
            temporal_window: coarsen.temporal_window,

            ratio: model.ratio,
            hidden: model.hidden,
            layers: model.layers,
            activation: model.activation,
            connectivity: model.connectivity,
            aggregation: model.aggregation,
            condition_bound: model.condition_bound,

            horizon: train.horizon,
            noise_amplitude: train.noise_amplitude,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            epochs: train.epochs,
            batch_size: train.batch_size,
            plateau_patience: train.plateau_patience,
            plateau_factor: train.plateau_factor,
            min_learning_rate: train.min_learning_rate,
            augment: train.augment,
            val_fraction: 0.2,
            stop_after: 0,
            resume: false,

            checkpoint: String::new(),
            input: String::new(),
            input_frame: 0,
            reference: String::new(),
            output: String::new(),
            algorithm: Algorithm::AeLatent,
            steps: 100,
            emit_every: 1,
            divergence_threshold: grain_core::rollout::DEFAULT_DIVERGENCE_THRESHOLD,
            strict: false,
            verify_parity: false,

            predicted: String::new(),
            truth: String::new(),
            threshold: Threshold::default().to_string(),
            min_size: grain_core::grainstats::DEFAULT_MIN_SIZE,
            plots: false,

            bench_meshes: vec![32, 64, 128],
            bench_ratios: vec![1, 2, 4, 8],
            bench_ndim: 2,
            bench_steps: 10,
        }
    }
}

/// Help text for every key, in the order flags are listed.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed; every random stream is derived from it"),
    ("parallel", "use the data-parallel execution path"),
    ("data_dir", "dataset directory (written by generate, read by train and stats)"),
    ("out_dir", "directory for checkpoints, predictions and reports"),
    ("dims", "Monte Carlo lattice extent per axis, comma separated"),
    ("num_trajectories", "number of independent Monte Carlo trajectories"),
    ("num_labels", "number of spin labels; 0 means one per site"),
    ("kt", "Monte Carlo temperature in units of the coupling"),
    ("coupling", "grain boundary coupling J"),
    ("neighborhood", "Monte Carlo neighborhood: moore or von_neumann"),
    ("sweeps_per_frame", "sweeps between stored frames"),
    ("num_frames", "stored frames per trajectory"),
    ("warmup_sweeps", "sweeps discarded before the first stored frame"),
    ("downsample", "block-average factor of the postprocessing"),
    ("gaussian_sigma", "Gaussian smoothing width in coarse cells"),
    ("temporal_window", "temporal averaging window in frames (odd)"),
    ("ratio", "per-axis compression of the autoencoder (power of two)"),
    ("hidden", "hidden width of every MLP"),
    ("layers", "message-passing layers"),
    ("activation", "relu or silu"),
    ("connectivity", "graph edges: von_neumann or moore"),
    ("aggregation", "message aggregation: sum or mean"),
    ("condition_bound", "largest accepted condition number of a mixing matrix"),
    ("horizon", "autoregressive steps in the training loss"),
    ("noise_amplitude", "std of the Gaussian noise added to input frames"),
    ("learning_rate", "initial learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("epochs", "training epochs"),
    ("batch_size", "windows per optimizer step"),
    ("plateau_patience", "epochs without improvement before the rate drops"),
    ("plateau_factor", "rate multiplier on a plateau"),
    ("min_learning_rate", "floor for the learning rate"),
    ("augment", "apply random grid symmetries to training windows"),
    ("val_fraction", "fraction of trajectories held out for validation"),
    ("stop_after", "stop training after this many epochs in total (0 = run all)"),
    ("resume", "continue from the training state in out_dir"),
    ("checkpoint", "checkpoint path (default: out_dir/checkpoint.ggck)"),
    ("input", "field container holding the initial frame"),
    ("input_frame", "frame of the input container to start from"),
    ("reference", "field container to compare predictions against"),
    ("output", "predicted trajectory path (default: out_dir/predicted.ggt)"),
    ("algorithm", "gnn_only, ae_original or ae_latent"),
    ("steps", "rollout steps"),
    ("emit_every", "record every n-th step (the last step is always recorded)"),
    ("divergence_threshold", "max |phi| beyond which a rollout counts as diverged"),
    ("strict", "exit with status 3 when a rollout diverges"),
    ("verify_parity", "also run the other autoencoder scheme and report the largest discrepancy"),
    ("predicted", "predicted field container or directory of containers"),
    ("truth", "ground-truth container or directory (default: data_dir/fields)"),
    ("threshold", "grain interior threshold: otsu (resolved per frame) or a number in (0, 1)"),
    ("min_size", "smallest component counted as a grain, in cells"),
    ("plots", "also write an SVG summary figure"),
    ("bench_meshes", "mesh extents per axis for the benchmark, comma separated"),
    ("bench_ratios", "compression ratios for the benchmark (1 = GNN only)"),
    ("bench_ndim", "spatial dimension of benchmark meshes"),
    ("bench_steps", "rollout steps timed per benchmark cell"),
];

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Adds one flag per config key plus `--config`.
pub fn with_config_flags(mut cmd: Command) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("TOML file with config keys; flags override it"),
    );
    let defaults = default_table();
    for &(key, help) in KEYS {
        let mut arg = Arg::new(key).long(flag_name(key)).help(help).action(ArgAction::Set);
        if matches!(defaults.get(key), Some(Value::Boolean(_))) {
            arg = arg.num_args(0..=1).default_missing_value("true").value_name("BOOL");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn default_table() -> Table {
    Table::try_from(RunConfig::default()).expect("default config serializes")
}

/// Interprets a flag value with the type of the key's default.
fn parse_flag(key: &str, raw: &str, default: &Value) -> Result<Value, CliError> {
    let bad = |what: &str| CliError::Config(format!("--{}: {raw:?} is not {what}", flag_name(key)));
    Ok(match default {
        Value::Boolean(_) => Value::Boolean(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Integer(_) => Value::Integer(raw.parse().map_err(|_| bad("an integer"))?),
        Value::Float(_) => Value::Float(raw.parse().map_err(|_| bad("a number"))?),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(|s| s.trim().parse::<i64>().map(Value::Integer).map_err(|_| bad("a comma-separated integer list")))
                .collect::<Result<_, _>>()?,
        ),
        _ => Value::String(raw.to_string()),
    })
}

pub fn load(matches: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut table = default_table();
    if let Some(path) = matches.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
        let file: Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
        for (k, v) in file {
            if !table.contains_key(&k) {
                return Err(CliError::Config(format!("{path}: unknown key {k:?}")));
            }
            table.insert(k, v);
        }
    }
    let defaults = default_table();
    for &(key, _) in KEYS {
        if let Some(raw) = matches.get_one::<String>(key) {
            table.insert(key.to_string(), parse_flag(key, raw, &defaults[key])?);
        }
    }
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.threshold()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn execution(&self) -> grain_core::Execution {
        if self.parallel {
            grain_core::Execution::Parallel
        } else {
            grain_core::Execution::Sequential
        }
    }

    pub fn mc(&self) -> McConfig {
        McConfig {
            dims: self.dims.clone(),
            num_labels: if self.num_labels == 0 {
                self.dims.iter().product::<usize>() as u32
            } else {
                self.num_labels
            },
            kt: self.kt,
            coupling: self.coupling,
            sweeps_per_frame: self.sweeps_per_frame,
            num_frames: self.num_frames,
            seed: self.seed,
            neighborhood: self.neighborhood,
            warmup_sweeps: self.warmup_sweeps,
        }
    }

    pub fn coarsen(&self) -> CoarsenConfig {
        CoarsenConfig {
            downsample: self.downsample,
            gaussian_sigma: self.gaussian_sigma,
            temporal_window: self.temporal_window,
        }
    }

    pub fn model(&self, ndim: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            ndim,
            channels,
            ratio: self.ratio,
            hidden: self.hidden,
            layers: self.layers,
            activation: self.activation,
            connectivity: self.connectivity,
            aggregation: self.aggregation,
            condition_bound: self.condition_bound,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            horizon: self.horizon,
            noise_amplitude: self.noise_amplitude,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            plateau_patience: self.plateau_patience,
            plateau_factor: self.plateau_factor,
            min_learning_rate: self.min_learning_rate,
            augment: self.augment,
            seed: self.seed,
        }
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            algorithm: self.algorithm,
            steps: self.steps,
            emit_every: self.emit_every,
            divergence_threshold: self.divergence_threshold,
        }
    }

    pub fn threshold(&self) -> Result<Threshold, CliError> {
        self.threshold.parse().map_err(CliError::from)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        or_default(&self.checkpoint, &self.out_dir, "checkpoint.ggck")
    }

    pub fn output_path(&self) -> PathBuf {
        or_default(&self.output, &self.out_dir, "predicted.ggt")
    }

    pub fn truth_path(&self) -> PathBuf {
        or_default(&self.truth, &self.data_dir, "fields")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn or_default(value: &str, dir: &Path, name: &str) -> PathBuf {
    if value.is_empty() {
        dir.join(name)
    } else {
        PathBuf::from(value)
    }
}
