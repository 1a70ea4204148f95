use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use accept_cli::commands::{self, GranularityArgs};
use accept_cli::error::{CliError, CliResult};
use accept_cli::runner::runs_root;
use accept_cli::spec::ExperimentSpec;
use accept_core::backbone::PretrainConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "accept", version, about = "Codebook-factorized soft prompt experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the codebook size r for a parameter budget.
    Budget(BudgetArgs),
    /// Pretrain and save a backbone.
    Pretrain(PretrainArgs),
    /// Train prompts for one config and write runs/<id>/.
    Train(TrainArgs),
    /// Re-evaluate the best checkpoint of a run.
    Eval(EvalArgs),
    /// Sweep the subspace width t at a fixed budget.
    SweepGranularity(SweepArgs),
    /// Ablate learnable codebook, subdivision and prompt placement.
    Ablate(AblateArgs),
    /// Few-shot adaptation over several seeds.
    Fewshot(FewshotArgs),
    /// Sweep the prepended prompt length at a fixed budget.
    LengthSweep(LengthArgs),
    /// Tabulate finished runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long)]
    d: Option<u64>,
    #[arg(long)]
    positions: Option<u64>,
    #[arg(long = "K")]
    k: Option<u64>,
    #[arg(long)]
    budget: Option<u64>,
    /// Report the resolved layout of an experiment config instead.
    #[arg(long, conflicts_with_all = ["d", "positions", "k", "budget"])]
    config: Option<PathBuf>,
    #[arg(long)]
    allow_over_budget: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// Pretraining recipe as JSON; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    allow_over_budget: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// A run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_parser = ["scpp", "scap"])]
    component: String,
    /// Total budget; the swept component gets what the complement leaves.
    #[arg(long)]
    budget: u64,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    positions: Option<usize>,
    /// Parameters of the other component, added to the `params` column.
    #[arg(long)]
    complement: Option<u64>,
    /// Subspace widths to try; every divisor of d when omitted.
    #[arg(long, num_args = 1..)]
    t: Vec<usize>,
    /// Train each cell with this config; counting only when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "lc,ps,pp,ap")]
    axes: Vec<String>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, num_args = 1.., default_values_t = [4, 16, 32])]
    gamma: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    allow_over_budget: bool,
}

#[derive(Args)]
struct LengthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, num_args = 1.., default_values_t = [0, 20, 40, 60, 80, 100])]
    lengths: Vec<usize>,
    /// Budget of the prepended component; taken from the config when omitted.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Run or sweep directories; everything under the runs root when omitted.
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_pretrain(path: &Path) -> CliResult<PretrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> CliResult<String> {
    let root = runs_root();
    match cli.command {
        Command::Budget(a) => match a.config {
            Some(path) => commands::budget_for_config(&ExperimentSpec::load(&path)?, a.allow_over_budget),
            None => match (a.d, a.positions, a.k, a.budget) {
                (Some(d), Some(p), Some(k), Some(b)) => commands::budget(d, p, k, b),
                _ => Err(CliError::usage("budget needs --d, --positions, --K and --budget (or --config)")),
            },
        },
        Command::Pretrain(a) => {
            let cfg = match a.config {
                Some(path) => load_pretrain(&path)?,
                None => PretrainConfig::desk(),
            };
            commands::pretrain(&cfg, a.seed, &a.out)
        }
        Command::Train(a) => {
            let spec = ExperimentSpec::load(&a.config)?;
            let (dir, summary) = commands::train(&spec, &root, a.allow_over_budget)?;
            eprintln!("run directory: {}", dir.display());
            Ok(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")
        }
        Command::Eval(a) => commands::eval(&a.run, &a.split, &root),
        Command::SweepGranularity(a) => {
            let spec = a.config.as_deref().map(ExperimentSpec::load).transpose()?;
            let args = GranularityArgs {
                component: a.component,
                budget: a.budget,
                d: a.d,
                positions: a.positions,
                complement: a.complement,
                t: a.t,
                jobs: a.jobs,
            };
            commands::sweep_granularity(&args, spec.as_ref(), &root)
        }
        Command::Ablate(a) => commands::ablate(&ExperimentSpec::load(&a.config)?, &a.axes, a.budget, a.jobs, &root),
        Command::Fewshot(a) => {
            let spec = ExperimentSpec::load(&a.config)?;
            let out = commands::fewshot(&spec, &a.gamma, a.seeds, a.jobs, &root, a.allow_over_budget)?;
            eprintln!("fewshot directory: {}", out.dir.display());
            Ok(out.summary_csv)
        }
        Command::LengthSweep(a) => {
            let spec = ExperimentSpec::load(&a.config)?;
            let out = commands::length_sweep(&spec, &a.lengths, a.budget, a.jobs, &root)?;
            eprintln!("length sweep directory: {}", out.dir.display());
            Ok(out.csv)
        }
        Command::Report(a) => {
            let csv = commands::report(&a.runs, &root)?;
            match a.out {
                Some(path) => {
                    std::fs::write(&path, &csv)?;
                    Ok(String::new())
                }
                None => Ok(csv),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
