use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pushdp::schedule::Variant;
use pushdp_cli::config::ExperimentConfig;
use pushdp_cli::experiment::{
    compare, comparison_csv, prepare, replicate_path, resolve_steps, run_replicates, sweep,
    sweep_csv, Axis,
};
use pushdp_cli::CliError;

#[derive(Parser)]
#[command(
    name = "pushdp",
    version,
    about = "Differentially private decentralized SGD experiments"
)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once per replicate and write one metrics CSV each.
    Run(Common),
    /// Run several variants plus the non-private baseline and tabulate them.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants, e.g. `const,dyn-c,dyn-mu,dyn`.
        #[arg(long, value_delimiter = ',', default_value = "const,dyn-c,dyn-mu,dyn")]
        variants: Vec<String>,
    },
    /// Run a grid over one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of rho_c, rho_mu, epsilon, n, graph.
        #[arg(long)]
        axis: String,
        /// Comma-separated values of the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Print the privacy budgets and per-step schedule without training.
    Accountant(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set schedule.rho_c=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeat: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output path; tables go to stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("engine.seed={s}"));
        }
        if let Some(r) = self.repeat {
            overrides.push(format!("experiment.repeat={r}"));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("engine.workers={w}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn emit(output: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match output {
        Some(path) => write_file(path, contents),
        None => std::io::stdout()
            .write_all(contents.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}

fn print_header(header: &[(String, String)]) {
    for (k, v) in header {
        println!("# {k}={v}");
    }
}

fn cmd_run(common: &Common) -> Result<(), CliError> {
    let config = common.load()?;
    print_header(&prepare(&config, config.engine.seed)?.header);
    let output = common
        .output
        .clone()
        .unwrap_or_else(|| config.experiment.output.clone());
    for (seed, log) in run_replicates(&config)? {
        let path = replicate_path(&output, seed, config.experiment.repeat);
        write_file(&path, &log.to_csv_string())?;
        println!("wrote {} ({} rows)", path.display(), log.rows.len());
    }
    Ok(())
}

fn cmd_compare(common: &Common, variants: &[String]) -> Result<(), CliError> {
    let config = common.load()?;
    let variants: Vec<Variant> = variants
        .iter()
        .map(|v| {
            v.parse()
                .map_err(|e| CliError::Config(format!("--variants: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let rows = compare(&config, &variants)?;
    emit(common.output.as_deref(), &comparison_csv(&rows))
}

fn cmd_sweep(common: &Common, axis: &str, values: &[String]) -> Result<(), CliError> {
    let config = common.load()?;
    let axis: Axis = axis.parse()?;
    let rows = sweep(&config, axis, values)?;
    emit(common.output.as_deref(), &sweep_csv(axis, &rows))
}

fn cmd_accountant(common: &Common) -> Result<(), CliError> {
    let config = common.load()?;
    let (steps, gamma, iterations, header) = resolve_steps(&config)?;
    let mut out = String::new();
    for (k, v) in &header {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str(&format!("# step_size={gamma}\n# iterations={iterations}\n"));
    out.push_str(&steps.to_csv());
    emit(common.output.as_deref(), &out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Run(common) => cmd_run(common),
        Command::Compare { common, variants } => cmd_compare(common, variants),
        Command::Sweep {
            common,
            axis,
            values,
        } => cmd_sweep(common, axis, values),
        Command::Accountant(common) => cmd_accountant(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
