use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moekit::io::ReportDoc;

mod commands;

#[derive(Parser)]
#[command(
    name = "moekit",
    version,
    about = "Cluster and merge experts in sparse mixture-of-experts models"
)]
struct Cli {
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Include wall-clock time in the report (makes output run-dependent).
    #[arg(long, global = true)]
    timing: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-redundancy model and a calibration batch.
    Gen(GenArgs),
    /// Collect per-expert calibration statistics.
    Calibrate(CalibrateArgs),
    /// Group experts in every layer.
    Cluster(ClusterArgs),
    /// Merge each cluster into one expert.
    Merge(MergeArgs),
    /// Run a pruning or one-shot grouping baseline.
    Prune(PruneArgs),
    /// Compare a reduced model against the original.
    Eval(EvalArgs),
    /// Exhaustive minimum-variance partition of one layer's experts.
    Oracle(OracleArgs),
    /// Expert-parameter counts before and after reduction.
    Params(ParamsArgs),
}

#[derive(Args)]
struct GenArgs {
    /// key=value file with layers, experts, groups, d_h, d_m, k, noise, seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set seed=7.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    batch: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    tokens: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    batch: PathBuf,
    /// Statistics JSON output.
    #[arg(long)]
    stats: PathBuf,
    /// Also cache intermediate activations (written next to the stats as `<stats>.act`).
    #[arg(long)]
    cache_activations: bool,
    /// Cache xW_up ⊙ xW_gate without applying SiLU to the gate.
    #[arg(long)]
    no_silu: bool,
    #[arg(long)]
    max_cache_bytes: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Eo,
    Rl,
    Weight,
}

#[derive(Clone, Copy, ValueEnum)]
enum RlVariant {
    Logits,
    Weight,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkageArg {
    Single,
    Complete,
    Average,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Hc,
    KmeansFix,
    KmeansRnd,
    Fcm,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    #[arg(long, value_enum, default_value = "eo")]
    metric: MetricArg,
    #[arg(long, value_enum, default_value = "logits")]
    rl_variant: RlVariant,
    #[arg(long, value_enum, default_value = "average")]
    linkage: LinkageArg,
    #[arg(long, value_enum, default_value = "hc")]
    method: MethodArg,
    /// Clusters per layer.
    #[arg(long, conflicts_with = "non_uniform", required_unless_present = "non_uniform")]
    budget: Option<usize>,
    /// Global fraction of experts to keep, split across layers by frequency.
    #[arg(long, value_name = "RATIO")]
    non_uniform: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Average,
    Frequency,
    Fixdom,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixDomArg {
    Act,
    Weight,
    #[value(name = "act+weight")]
    ActWeight,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    /// Report written by `cluster`.
    #[arg(long)]
    assignments: PathBuf,
    #[arg(long, value_enum, default_value = "frequency")]
    strategy: StrategyArg,
    #[arg(long, value_enum)]
    fixdom_features: Option<FixDomArg>,
    /// Merged checkpoint output.
    #[arg(long)]
    output_model: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PruneMethodArg {
    F,
    S,
    O,
    OSampled,
    Msmoe,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    /// Calibration batch (O-prune only).
    #[arg(long)]
    batch: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: PruneMethodArg,
    /// Experts kept per layer (O-prune, msmoe).
    #[arg(long)]
    budget: Option<usize>,
    /// Global fraction kept (F-prune, S-prune).
    #[arg(long)]
    ratio: Option<f64>,
    /// Subsets evaluated per layer by sampled O-prune.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measure O-prune deviation at the model output instead of per layer.
    #[arg(long)]
    end_to_end: bool,
    #[arg(long)]
    output_model: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Reduced checkpoint to compare.
    #[arg(long, required_unless_present = "fcm")]
    reduced: Option<PathBuf>,
    #[arg(long)]
    batch: PathBuf,
    /// Statistics of the original model, for cluster validity indices.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Cluster report, for validity indices.
    #[arg(long, requires = "stats")]
    assignments: Option<PathBuf>,
    /// Soft-merge with fuzzy C-means to this many experts and evaluate that.
    #[arg(long, requires = "stats", value_name = "R")]
    fcm: Option<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long)]
    budget: usize,
    /// Linkage whose HC cost is compared against the optimum.
    #[arg(long, value_enum, default_value = "average")]
    linkage: LinkageArg,
}

#[derive(Args)]
struct ParamsArgs {
    /// Published architecture: mixtral-8x7b or qwen1.5-moe-a2.7b.
    #[arg(long, conflicts_with_all = ["model", "reduced"], required_unless_present = "model")]
    preset: Option<String>,
    /// Experts per layer after reduction; repeat for several points.
    #[arg(long, requires = "preset")]
    experts: Vec<u64>,
    #[arg(long, requires = "reduced")]
    model: Option<PathBuf>,
    #[arg(long)]
    reduced: Option<PathBuf>,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MOEKIT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| moekit::Error::Config(format!("MOEKIT_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let start = Instant::now();
    let mut doc: ReportDoc = match cli.command {
        Command::Gen(a) => commands::gen(a)?,
        Command::Calibrate(a) => commands::calibrate(a)?,
        Command::Cluster(a) => commands::cluster(a)?,
        Command::Merge(a) => commands::merge(a)?,
        Command::Prune(a) => commands::prune(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Oracle(a) => commands::oracle(a)?,
        Command::Params(a) => commands::params(a)?,
    };
    if cli.timing {
        doc.timing_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    match cli.out {
        Some(path) => doc.write(path)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{}", doc.to_json()?) {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                other => other?,
            }
        }
    }
    Ok(())
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let code = err
        .chain()
        .find_map(|cause| {
            if let Some(e) = cause.downcast_ref::<moekit::Error>() {
                Some(e.code())
            } else if cause.is::<std::io::Error>() {
                Some("io")
            } else if cause.is::<serde_json::Error>() {
                Some("json")
            } else {
                None
            }
        })
        .unwrap_or("internal");
    serde_json::json!({ "error": { "code": code, "message": format!("{err:#}") } })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let message = e.render().to_string();
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "code": "usage", "message": message.trim_end() } })
            );
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::FAILURE
        }
    }
}
