use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualgn::config::{read_config_file, resolve, SEED_ENV};
use dualgn::run::run;
use dualgn::verify::{run_suite, Suite};
use dualgn::CliError;

#[derive(Parser)]
#[command(name = "dualgn", version, about = "Prox-linear training runs and verification suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write per-step metrics to CSV.
    Run(Box<RunArgs>),
    /// Run a built-in property suite.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
    },
}

/// Values stay strings here so parse errors name the offending key.
#[derive(Args)]
struct RunArgs {
    /// `key = value` file with the same keys as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// spl, armijo_spl, sgd, momentum or adam
    #[arg(long)]
    method: Option<String>,
    /// gradient or proxlinear
    #[arg(long)]
    direction: Option<String>,
    /// primal or dual
    #[arg(long)]
    path: Option<String>,
    /// squared or logistic
    #[arg(long)]
    loss: Option<String>,
    /// linear or mlp:<hidden widths>
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Stop after this many steps.
    #[arg(long)]
    steps: Option<String>,
    /// Falls back to DUALGN_SEED.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    l1: Option<String>,
    #[arg(long)]
    l2: Option<String>,
    #[arg(long)]
    armijo_beta: Option<String>,
    /// Comma list; one CSV per value, suffixed _g<value>.
    #[arg(long)]
    grid: Option<String>,
    /// gamma (default) or eta
    #[arg(long)]
    grid_param: Option<String>,
    /// blobs:<n>,<d>,<k>,<spread> or idx:<images>,<labels>
    #[arg(long)]
    data: Option<String>,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn flags(self) -> BTreeMap<String, String> {
        let pairs = [
            ("method", self.method),
            ("direction", self.direction),
            ("path", self.path),
            ("loss", self.loss),
            ("model", self.model),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("tau", self.tau),
            ("tol", self.tol),
            ("batch-size", self.batch_size),
            ("epochs", self.epochs),
            ("steps", self.steps),
            ("seed", self.seed),
            ("l1", self.l1),
            ("l2", self.l2),
            ("armijo-beta", self.armijo_beta),
            ("grid", self.grid),
            ("grid-param", self.grid_param),
            ("data", self.data),
            ("out", self.out.map(|p| p.to_string_lossy().into_owned())),
        ];
        pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect()
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(mut args) => {
            let file = match args.config.take() {
                Some(path) => read_config_file(&path)?,
                None => BTreeMap::new(),
            };
            let cfg = resolve(file, (*args).flags(), std::env::var(SEED_ENV).ok())?;
            let mut aborted = Vec::new();
            for summary in run(&cfg)? {
                let acc = summary.final_acc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
                println!("{}: {} steps, train_acc {acc}", summary.path.display(), summary.steps);
                if let Some(reason) = summary.aborted {
                    aborted.push(format!("{}: {reason}", summary.path.display()));
                }
            }
            if aborted.is_empty() {
                Ok(())
            } else {
                Err(CliError::Numeric(aborted.join("; ")))
            }
        }
        Command::Verify { suite } => {
            let checks = run_suite(suite)?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if failed == 0 {
                Ok(())
            } else {
                Err(CliError::Verification(format!("{failed} of {} checks", checks.len())))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dualgn: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
