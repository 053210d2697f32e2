//! `graphmsl`: command-line front end for the graph multi-similarity toolkit.

mod commands;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use error::CliError;

#[derive(Debug, Parser, Serialize)]
#[command(name = "graphmsl", version, about = "Graph multi-similarity learning for molecules")]
pub struct Cli {
    /// Worker threads for row-parallel similarity and encoding.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// JSON object of flag values; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Parse a molecule file and report per-molecule counts.
    Parse(ParseArgs),
    /// Compute circular fingerprints into a binary cache.
    Fingerprint(FingerprintArgs),
    /// Build a self-similarity matrix for one modality.
    Simmatrix(SimmatrixArgs),
    /// Pair-weight and fuse self-similarity matrices into a target matrix.
    Fuse(FuseArgs),
    /// Pre-train the encoder and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Check softmax(D) = T convergence on random targets.
    VerifyTheorem(VerifyArgs),
    /// Write graph embeddings from a checkpoint.
    Embed(EmbedArgs),
    /// Fit a linear probe on frozen embeddings.
    Probe(ProbeArgs),
    /// Compare nearest-neighbour and random fingerprint similarity.
    RetrievalCheck(RetrievalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ParseArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Print atom and bond counts per molecule.
    #[arg(long)]
    pub stats: bool,
    #[arg(long)]
    pub strict_valence: bool,
    /// Keep the largest fragment of dotted SMILES instead of failing.
    #[arg(long)]
    pub largest_fragment: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FingerprintArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub radius: u32,
    #[arg(long, default_value_t = 2048)]
    pub bits: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CliModality {
    Smiles,
    Nmr,
    Image,
    Fingerprint,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Bin,
}

#[derive(Debug, Args, Serialize)]
pub struct SimmatrixArgs {
    #[arg(long, value_enum)]
    pub modality: CliModality,
    /// Embedding JSON Lines (smiles, nmr, image).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Fingerprint cache (fingerprint modality).
    #[arg(long)]
    pub fingerprints: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args, Serialize)]
pub struct FuseArgs {
    /// Self-similarity matrices. Binary inputs are placed by their modality
    /// tag, CSV inputs by position in (smiles, nmr, image, fingerprint).
    #[arg(long, value_delimiter = ',', required = true)]
    pub inputs: Vec<PathBuf>,
    /// Weights for (smiles, nmr, image, fingerprint); must sum to 1.
    #[arg(long, value_delimiter = ',', conflicts_with = "fusion_preset")]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub fusion_preset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Leave the anchor out of its own softmax row.
    #[arg(long)]
    pub exclude_self_pair: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CliLevel {
    Graph,
    Node,
    Bilevel,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CliLatent {
    Dot,
    Cosine,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CliReadout {
    Mean,
    Sum,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub mols: PathBuf,
    #[arg(long, value_enum, default_value_t = CliLevel::Graph)]
    pub level: CliLevel,
    #[arg(long, default_value = "fingerprint")]
    pub fusion_preset: String,
    /// Explicit fusion weights; overrides the preset.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub embeddings_smiles: Option<PathBuf>,
    #[arg(long)]
    pub embeddings_nmr: Option<PathBuf>,
    #[arg(long)]
    pub embeddings_image: Option<PathBuf>,
    #[arg(long)]
    pub peaks: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: u32,
    #[arg(long, default_value_t = 256)]
    pub batch: u32,
    #[arg(long, default_value_t = 1.0)]
    pub tau1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau2: f64,
    #[arg(long, value_enum, default_value_t = CliLatent::Cosine)]
    pub latent: CliLatent,
    #[arg(long, default_value_t = 0.1)]
    pub latent_temp: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, value_enum, default_value_t = CliReadout::Mean)]
    pub readout: CliReadout,
    #[arg(long, default_value_t = 2)]
    pub radius: u32,
    #[arg(long, default_value_t = 2048)]
    pub bits: u32,
    /// Renormalize fusion over available modalities instead of failing.
    #[arg(long)]
    pub permissive_missing: bool,
    #[arg(long)]
    pub exclude_self_pair: bool,
    /// Loss history CSV (epoch, batch, loss, grad_norm).
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Continue from this checkpoint up to --epochs.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 16)]
    pub n: u32,
    #[arg(long, default_value_t = 10)]
    pub trials: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50_000)]
    pub max_steps: u32,
    /// Largest accepted |softmax(D) - T|.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub grad_tol: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub mols: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CliTask {
    Cls,
    Reg,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub mols: PathBuf,
    #[arg(long, value_enum)]
    pub task: CliTask,
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    pub split: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Which entry of each molecule's label array to probe.
    #[arg(long, default_value_t = 0)]
    pub label_index: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub mols: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv`, folding in `--config` values for flags not given
/// explicitly.
fn parse_args(argv: Vec<OsString>) -> Result<Cli, CliError> {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(&argv)?;
    let Some(path) = matches.get_one::<PathBuf>("config").cloned() else {
        return Ok(Cli::from_arg_matches(&matches)?);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let json: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let obj = json
        .as_object()
        .ok_or_else(|| CliError::Usage(format!("{}: config must be a JSON object", path.display())))?;
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let sub = cmd.find_subcommand(name).expect("known subcommand");
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in obj {
        let long = key.replace('_', "-");
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(long.as_str()))
            .ok_or_else(|| CliError::Usage(format!("config key {key:?} is not a flag of {name}")))?;
        if sub_matches.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        let rendered = match value {
            serde_json::Value::Bool(true) => None,
            serde_json::Value::Bool(false) | serde_json::Value::Null => continue,
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Number(n) => Some(n.to_string()),
            serde_json::Value::Array(items) => Some(
                items
                    .iter()
                    .map(|v| v.as_str().map_or_else(|| v.to_string(), str::to_string))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            serde_json::Value::Object(_) => {
                return Err(CliError::Usage(format!("config key {key:?} has an object value")))
            }
        };
        extra.push(format!("--{long}").into());
        if let Some(v) = rendered {
            extra.push(v.into());
        }
    }
    let mut merged = argv;
    merged.extend(extra);
    let matches = cmd.try_get_matches_from(&merged)?;
    Ok(Cli::from_arg_matches(&matches)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match parse_args(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
        Err(e) => return e.report(None),
    };
    log::info!("resolved config: {}", serde_json::to_string(&cli).expect("args serialize"));
    let name = subcommand_name(&cli.command);
    match graphmsl::par::with_threads(cli.threads, || commands::run(&cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(Some(name)),
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Parse(_) => "parse",
        Command::Fingerprint(_) => "fingerprint",
        Command::Simmatrix(_) => "simmatrix",
        Command::Fuse(_) => "fuse",
        Command::Pretrain(_) => "pretrain",
        Command::VerifyTheorem(_) => "verify-theorem",
        Command::Embed(_) => "embed",
        Command::Probe(_) => "probe",
        Command::RetrievalCheck(_) => "retrieval-check",
    }
}
