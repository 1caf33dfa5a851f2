use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use wellcast::data::{load_series, Channel, Normalizer, RawSeries};
use wellcast::enkf::{FilterConfig, FilterTrace};
use wellcast::model::{ModelConfig, ModelWeights};
use wellcast::pipeline::{
    compare, j_trace, load_sw_csv, run_assimilation, run_baseline, save_sw_csv, summarize, train_from_series,
    write_j_csv, Comparison, SwRecord, DEFAULT_SW_ALPHA, DEFAULT_VAL_FRACTION,
};
use wellcast::sim::{derive_sibling, simulate_well, WellScenario};
use wellcast::{Error, Result};

const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "wellcast", version, about = "LSTM flow forecasting with ensemble Kalman bias estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every stochastic component; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Subcommand JSON config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic well record (plus `<out>.latent.csv`).
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Emit a sibling of the configured well with this production offset.
        #[arg(long)]
        sibling_bias: Option<f64>,
    },
    /// Train the regressor; writes weights.json, normalizer.json and train_loss.csv into `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Monte Carlo predictive trace without assimilation (plus `<out>.sw.csv`).
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Ensemble Kalman filter trace (plus `<out>.sw.csv`).
    Assimilate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        members: Option<usize>,
    },
    /// Score traces against the measurements; writes summary.json and per-trace J CSVs into `--out`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        normalizer: PathBuf,
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
    },
    /// Render an evaluation summary as a plain-text table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        summary: PathBuf,
    },
}

#[derive(Args)]
struct ModelInputs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    normalizer: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    schema_version: u32,
    scenario: WellScenario,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    schema_version: u32,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default = "default_val_fraction")]
    val_fraction: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineConfig {
    schema_version: u32,
    #[serde(default = "default_n_samples")]
    n_samples: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssimilateConfig {
    schema_version: u32,
    #[serde(default)]
    filter: FilterConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateConfig {
    schema_version: u32,
    #[serde(default = "default_alpha")]
    sw_alpha: f64,
    /// Measurement sigma in normalized units; defaults to the normalizer's flow sigma.
    #[serde(default)]
    meas_sigma: Option<f64>,
}

fn default_val_fraction() -> f64 {
    DEFAULT_VAL_FRACTION
}
fn default_n_samples() -> usize {
    1000
}
fn default_alpha() -> f64 {
    DEFAULT_SW_ALPHA
}

trait Versioned {
    fn version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {$(
        impl Versioned for $t {
            fn version(&self) -> u32 {
                self.schema_version
            }
        }
    )*};
}
versioned!(SimulateConfig, TrainConfig, BaselineConfig, AssimilateConfig, EvaluateConfig);

fn load_config<T: DeserializeOwned + Versioned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: T = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if cfg.version() != CONFIG_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{}: schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
            path.display(),
            cfg.version()
        )));
    }
    Ok(cfg)
}

fn optional_config<T: DeserializeOwned + Versioned>(path: Option<&PathBuf>, default: impl FnOnce() -> T) -> Result<T> {
    path.map_or_else(|| Ok(default()), |p| load_config(p))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `dir/stem.suffix` next to `path`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn run_id(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("trace")
        .to_string()
}

fn normalized_input(inputs: &ModelInputs) -> Result<(RawSeries, ModelWeights, Normalizer)> {
    let weights = ModelWeights::load(&inputs.weights)?;
    let norm = Normalizer::load(&inputs.normalizer)?;
    let series = norm.normalize(&load_series(&inputs.data)?)?;
    Ok((series, weights, norm))
}

fn cmd_simulate(common: &Common, sibling_bias: Option<f64>) -> Result<()> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("simulate requires --config <scenario json>".into()))?;
    let mut cfg: SimulateConfig = load_config(path)?;
    let truth = match sibling_bias {
        None => {
            if let Some(seed) = common.seed {
                cfg.scenario.seed = seed;
            }
            simulate_well(&cfg.scenario)?
        }
        Some(bias) => {
            let base = simulate_well(&cfg.scenario)?;
            let seed = common.seed.unwrap_or(cfg.scenario.seed.wrapping_add(1));
            derive_sibling(&base, bias, seed)?
        }
    };
    truth.series.save(&common.out)?;
    truth.write_latent_csv(sidecar(&common.out, "latent.csv"))
}

fn cmd_train(common: &Common, data: &Path, epochs: Option<usize>, val_fraction: Option<f64>) -> Result<()> {
    let mut cfg = optional_config(common.config.as_ref(), || TrainConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        model: ModelConfig::default(),
        val_fraction: DEFAULT_VAL_FRACTION,
    })?;
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
    }
    if let Some(e) = epochs {
        cfg.model.epochs = e;
    }
    if let Some(v) = val_fraction {
        cfg.val_fraction = v;
    }
    let raw = load_series(data)?;
    let outcome = train_from_series(&raw, &cfg.model, cfg.val_fraction)?;
    create_dir(&common.out)?;
    outcome.weights.save(common.out.join("weights.json"))?;
    outcome.normalizer.save(common.out.join("normalizer.json"))?;
    outcome.report.save(common.out.join("train_loss.csv"))
}

fn cmd_baseline(common: &Common, inputs: &ModelInputs, n_samples: Option<usize>) -> Result<()> {
    let mut cfg = optional_config(common.config.as_ref(), || BaselineConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        n_samples: default_n_samples(),
        seed: 0,
    })?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = n_samples {
        cfg.n_samples = n;
    }
    let (series, weights, norm) = normalized_input(inputs)?;
    let (trace, sw) = run_baseline(&series, &weights, &norm, cfg.n_samples, cfg.seed)?;
    trace.save(&common.out)?;
    save_sw_csv(&sw, sidecar(&common.out, "sw.csv"))
}

fn cmd_assimilate(common: &Common, inputs: &ModelInputs, members: Option<usize>) -> Result<()> {
    let mut cfg = optional_config(common.config.as_ref(), || AssimilateConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        filter: FilterConfig::default(),
    })?;
    if let Some(seed) = common.seed {
        cfg.filter.seed = seed;
    }
    if let Some(n) = members {
        cfg.filter.n_members = n;
    }
    let (series, weights, norm) = normalized_input(inputs)?;
    let (trace, sw) = run_assimilation(&series, &weights, &norm, &cfg.filter)?;
    trace.save(&common.out)?;
    save_sw_csv(&sw, sidecar(&common.out, "sw.csv"))
}

fn cmd_evaluate(common: &Common, data: &Path, normalizer: &Path, traces: &[PathBuf]) -> Result<()> {
    let cfg = optional_config(common.config.as_ref(), || EvaluateConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        sw_alpha: DEFAULT_SW_ALPHA,
        meas_sigma: None,
    })?;
    let norm = Normalizer::load(normalizer)?;
    let series = norm.normalize(&load_series(data)?)?;
    let meas_sigma = cfg.meas_sigma.unwrap_or_else(|| norm.sigma(Channel::FlowRate));
    create_dir(&common.out)?;
    let mut runs = Vec::new();
    for (i, path) in traces.iter().enumerate() {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let trace = FilterTrace::from_reader(file)?;
        let j = j_trace(&trace, &series, meas_sigma)?;
        let sw_path = sidecar(path, "sw.csv");
        let sw: Option<Vec<SwRecord>> = if sw_path.exists() {
            Some(load_sw_csv(&sw_path)?)
        } else {
            None
        };
        let mut id = run_id(path);
        if traces[..i].iter().any(|p| run_id(p) == id) {
            id = format!("{id}#{i}");
        }
        let summary = summarize(&id, &trace, &j, sw.as_deref(), cfg.sw_alpha)?;
        let j_path = common.out.join(format!("{}.j.csv", id.replace('#', "_")));
        let file = fs::File::create(&j_path).map_err(|e| Error::io(&j_path, e))?;
        write_j_csv(&trace, &j, std::io::BufWriter::new(file))?;
        runs.push(summary);
    }
    write_json(&compare(runs), &common.out.join("summary.json"))
}

fn cmd_report(common: &Common, summary: &Path) -> Result<()> {
    let text = fs::read_to_string(summary).map_err(|e| Error::io(summary, e))?;
    let cmp: Comparison = serde_json::from_str(&text).map_err(|e| Error::json(summary.display().to_string(), e))?;
    let mut out = format!(
        "{:<24} {:>12} {:>12} {:>8} {:>14} {:>10} {:>10}\n",
        "run", "median_j", "mean_j", "steps", "sw_rejections", "p50_s", "max_s"
    );
    for r in &cmp.runs {
        out += &format!(
            "{:<24} {:>12.5} {:>12.5} {:>8} {:>14} {:>10.4} {:>10.4}\n",
            r.run_id,
            r.median_j,
            r.mean_j,
            r.n_steps,
            r.sw_rejections.map_or("-".to_string(), |n| n.to_string()),
            r.wallclock_p50_step_s,
            r.wallclock_max_step_s
        );
    }
    out += &match &cmp.winner {
        Some(w) => format!("lowest median J: {w}\n"),
        None => "lowest median J: tie\n".to_string(),
    };
    print!("{out}");
    fs::write(&common.out, out).map_err(|e| Error::io(&common.out, e))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { common, sibling_bias } => cmd_simulate(common, *sibling_bias),
        Command::Train {
            common,
            data,
            epochs,
            val_fraction,
        } => cmd_train(common, data, *epochs, *val_fraction),
        Command::Baseline {
            common,
            inputs,
            n_samples,
        } => cmd_baseline(common, inputs, *n_samples),
        Command::Assimilate {
            common,
            inputs,
            members,
        } => cmd_assimilate(common, inputs, *members),
        Command::Evaluate {
            common,
            data,
            normalizer,
            traces,
        } => cmd_evaluate(common, data, normalizer, traces),
        Command::Report { common, summary } => cmd_report(common, summary),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
