//! `april`: command-line entry point for the synthesis pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "april", version, about = "LLM-driven API synthesis: oracles, prompt search, GRPO and benchmarks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding run records.
    #[arg(long, global = true)]
    pub runs_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sandbox worker count.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Validate configuration and inputs, then exit without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Keep per-job sandbox workspaces for inspection.
    #[arg(long, global = true)]
    pub keep_workspaces: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a validation suite for one task from its reference implementation.
    GenOracle(GenOracleArgs),
    /// Synthesize and execute a single task.
    Synth(SynthArgs),
    /// Optimize a synthesis prompt by beam search over textual edits.
    Apo(ApoArgs),
    /// Fine-tune a policy with GRPO against execution rewards.
    Train(TrainArgs),
    /// Run a benchmark and write a report.
    Bench(BenchArgs),
    /// Render a report, rebuild one from a run, or compare two reports.
    Report(ReportArgs),
    /// Print the events of a run as JSON lines.
    Replay(ReplayArgs),
    /// Serve one request of the stub execution shim on stdin/stdout.
    #[command(hide = true)]
    StubShim,
    /// Serve the toy policy over the external-policy protocol.
    #[command(hide = true)]
    ToyPolicyHost,
}

#[derive(Debug, Args)]
pub struct GenOracleArgs {
    #[arg(long)]
    pub task: PathBuf,
    /// Reference implementation source.
    #[arg(long)]
    pub ref_impl: PathBuf,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Documentation given to the agent; defaults to the task signature and examples.
    #[arg(long)]
    pub docstrings: Option<PathBuf>,
    /// Backend used for any role the config leaves unset.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub task: PathBuf,
    /// Prompt template file, or `builtin`.
    #[arg(long, default_value = "builtin")]
    pub prompt: String,
    #[arg(long)]
    pub backend: Option<PathBuf>,
    /// Where to write the extracted candidate source.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApoArgs {
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// File listing training task ids, one per line.
    #[arg(long)]
    pub train_ids: PathBuf,
    #[arg(long, default_value = "builtin")]
    pub init_prompt: String,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Edit proposals requested per beam member.
    #[arg(long)]
    pub proposals: Option<usize>,
    /// Backend for synthesis, and for critique and edit when the config leaves them unset.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    /// Search-tree trace; defaults to `<out>.trace.jsonl`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Toy,
    External,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Task directory; the toy policy uses the built-in toy domain without it.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub policy: PolicyKind,
    /// External policy host command line (whitespace separated).
    #[arg(long)]
    pub policy_cmd: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory for `report.json` and `checkpoint.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long, default_value = "builtin")]
    pub prompt: String,
    #[arg(long)]
    pub backend: Option<PathBuf>,
    /// Extra attempts per failing task, reported separately as best-of-N.
    #[arg(long, default_value_t = 1)]
    pub attempts: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["file", "compare", "run"])))]
pub struct ReportArgs {
    /// A report JSON file to render.
    pub file: Option<PathBuf>,
    /// Baseline and treatment reports.
    #[arg(long, num_args = 2, value_names = ["BASELINE", "TREATMENT"])]
    pub compare: Option<Vec<PathBuf>>,
    /// Rebuild the report of a bench run from its event log.
    #[arg(long)]
    pub run: Option<String>,
    /// Write the (rebuilt) report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Run id; lists the known runs when omitted.
    pub run_id: Option<String>,
    /// Only events of this kind, e.g. `candidate_scored`.
    #[arg(long)]
    pub kind: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version exit 0, usage errors exit 2
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match cli.command {
        Command::StubShim => return ExitCode::from(april_core::stub_shim::serve_stdio()),
        Command::ToyPolicyHost => {
            return match april_core::rlvr::serve_toy_policy_stdio() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(2)
                }
            }
        }
        _ => {}
    }
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("APRIL_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(commands::dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<commands::UsageError>() {
                Some(_) => ExitCode::from(2),
                None => ExitCode::from(1),
            }
        }
    }
}
