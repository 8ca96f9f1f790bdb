use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Curvature certificates and trajectory diagnostics for ReLU network losses.
#[derive(Debug, Parser)]
#[command(name = "convexity-lab", version)]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for any long flag.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for independent trials.
    #[arg(long, global = true, env = "CONVEXITY_LAB_JOBS")]
    pub jobs: Option<usize>,

    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    pub report: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certify strong convexity at a point and audit the curvature floor.
    Certify(CertifyArgs),
    /// Integrate gradient flow and record curvature along the path.
    Flow(FlowArgs),
    /// Train with SGD over one or more seeds.
    Sgd(SgdArgs),
    /// Search a linear network for nonzero critical points in U(lambda).
    LinearAudit(LinearArgs),
    /// Render trajectory CSVs as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// `csv:PATH`, `idx:IMAGES,LABELS[,limit=N][,digit=D]` or
    /// `teacher:arch=AxBx1[,n=N][,noise=S][,scale=S][,seed=K][,radius=R]`.
    #[arg(long)]
    pub data: String,
    /// The CSV file starts with a header line.
    #[arg(long)]
    pub header: bool,
    /// Declared input radius; must cover every input.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Rescale inputs so the largest norm equals this value.
    #[arg(long)]
    pub normalize: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Layer widths `n0,n1,...,1`. Optional when weights come from a file or the teacher.
    #[arg(long)]
    pub arch: Option<String>,
    /// `zero`, `random`, `teacher` or a JSON weights file.
    #[arg(long, default_value = "random")]
    pub weights: String,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub theta: f64,
    /// Random directions for the curvature-floor audit.
    #[arg(long, default_value_t = 1000)]
    pub floor_trials: usize,
    #[arg(long, default_value_t = 200)]
    pub probe_samples: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub probe_radius: f64,
    /// Gradient norm below which the point counts as critical.
    #[arg(long, default_value_t = 1e-6)]
    pub critical_tol: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FlowArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Integrator step; defaults to 1e-2 / (1 + |grad|) at the start.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub horizon: f64,
    #[arg(long, default_value_t = 1)]
    pub log_every: usize,
    /// Trajectory CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub percentile: f64,
    /// Exit 2 when the decay bound fails on the convex window.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SgdArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long)]
    pub epochs: usize,
    /// A rate, or a schedule `EPOCH:RATE,EPOCH:RATE,...` starting at epoch 0.
    #[arg(long)]
    pub lr: String,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long, default_value_t = 1)]
    pub log_every: usize,
    /// Directory for per-trial CSVs `trial-SEED.csv`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub percentile: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LinearArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, default_value_t = 32)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rotation angles tried at each nonzero critical point.
    #[arg(long, default_value = "0.001,0.1,1")]
    pub angles: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlotArgs {
    /// Trajectory CSVs.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Normalized values above this are drawn at the ceiling.
    #[arg(long, default_value_t = 10.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

/// Reads `--config` from the raw arguments, if present.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn flag_present(argv: &[OsString], key: &str) -> bool {
    let long = format!("--{key}");
    let eq = format!("--{key}=");
    argv.iter().any(|a| {
        let s = a.to_string_lossy();
        s == long || s.starts_with(&eq)
    })
}

/// Parses a flat config file into `(key, value)` pairs. Each key names a long
/// flag without dashes; underscores and dashes are interchangeable. Values are
/// strings, numbers or booleans; a `true` boolean passes a bare flag and
/// `false` omits it.
pub fn read_config(path: &Path) -> Result<Vec<(String, Option<String>)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let table: toml::Table = text.parse().map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (key, value) in table {
        let key = key.replace('_', "-");
        let v = match value {
            toml::Value::String(s) => Some(s),
            toml::Value::Integer(i) => Some(i.to_string()),
            toml::Value::Float(f) => Some(format!("{f:?}")),
            toml::Value::Boolean(true) => None,
            toml::Value::Boolean(false) => continue,
            other => {
                return Err(format!(
                    "{}: key {key:?} has a {} value; only flat strings, numbers and booleans are allowed",
                    path.display(),
                    other.type_str()
                ))
            }
        };
        out.push((key, v));
    }
    Ok(out)
}

/// Appends config entries for flags absent from `argv`, so explicit flags win.
pub fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let mut merged = argv.clone();
    for (key, value) in read_config(&path)? {
        if key == "config" || flag_present(&argv, &key) {
            continue;
        }
        merged.push(format!("--{key}").into());
        if let Some(v) = value {
            merged.push(v.into());
        }
    }
    Ok(merged)
}
