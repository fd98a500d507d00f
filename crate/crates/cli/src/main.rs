use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kolmo_cli::checks;
use kolmo_cli::{
    exit, load_config, parse_config, presets, run, write_outputs, ConfigError, ExperimentConfig, Selector,
};

#[derive(Parser)]
#[command(name = "kolmo", version, about = "Mild-solution and BSDE experiments for semilinear Kolmogorov equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads; affects speed only.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write report.json, timings.json and CSV dumps.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preset name, used when no config file is given.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite: analytic, probabilistic or all.
    Check {
        #[arg(default_value = "all")]
        selector: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the shipped presets, or print one as JSON.
    Presets { name: Option<String> },
}

fn config_error(e: ConfigError) -> ExitCode {
    eprintln!("{e}");
    ExitCode::from(exit::CONFIG_ERROR as u8)
}

fn resolve(config: Option<PathBuf>, preset: Option<String>) -> Result<ExperimentConfig, ConfigError> {
    match (config, preset) {
        (Some(path), _) => load_config(&path),
        (None, Some(name)) => parse_config(&format!("{{\"preset\": {}}}", serde_json::Value::String(name))),
        (None, None) => parse_config("{}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("cannot start worker pool: {e}");
            return ExitCode::from(exit::CONFIG_ERROR as u8);
        }
    };
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> ExitCode {
    match command {
        Command::Presets { name: None } => {
            for n in presets::NAMES {
                println!("{n}");
            }
            ExitCode::SUCCESS
        }
        Command::Presets { name: Some(n) } => match presets::by_name(&n) {
            Some(c) => {
                println!("{}", serde_json::to_string_pretty(&c).unwrap_or_default());
                ExitCode::SUCCESS
            }
            None => config_error(ConfigError::Invalid(vec![format!("unknown preset {n:?}")])),
        },
        Command::Run { config, preset, seed, out } => {
            let mut cfg = match resolve(config, preset) {
                Ok(c) => c,
                Err(e) => return config_error(e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = Some(o.display().to_string());
            }
            let dir = PathBuf::from(cfg.out.clone().unwrap_or_else(|| "kolmo-out".into()));
            let outcome = run(&cfg);
            if let Err(e) = write_outputs(&outcome, &dir) {
                eprintln!("cannot write outputs: {e}");
                return ExitCode::from(exit::CHECK_FAILED as u8);
            }
            for c in &outcome.report.checks {
                println!(
                    "{} {:<32} measured={:.4e} threshold={:.4e}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.threshold
                );
            }
            if let Some(e) = &outcome.report.error {
                eprintln!("error: {e}");
            }
            println!("report written to {}", dir.join("report.json").display());
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(exit::CHECK_FAILED as u8)
            }
        }
        Command::Check { selector, seed, config, out } => {
            let selector: Selector = match selector.parse() {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(exit::CONFIG_ERROR as u8);
                }
            };
            let base = match config {
                Some(p) => match load_config(&p) {
                    Ok(c) => Some(c),
                    Err(e) => return config_error(e),
                },
                None => None,
            };
            let seed = seed
                .or(base.as_ref().map(|c| c.seed))
                .unwrap_or(presets::by_name(presets::DEFAULT).map_or(0, |c| c.seed));
            let mut rows = Vec::new();
            for id in checks::ids(selector) {
                let r = checks::run_one(id, seed);
                println!("{}", r.line());
                rows.push(r);
            }
            if let Some(dir) = out.or(base.and_then(|c| c.out.map(PathBuf::from))) {
                let written = std::fs::create_dir_all(&dir).and_then(|_| {
                    std::fs::write(
                        dir.join("checks.json"),
                        serde_json::to_string_pretty(&rows).unwrap_or_default() + "\n",
                    )
                });
                if let Err(e) = written {
                    eprintln!("cannot write checks.json: {e}");
                }
            }
            if rows.iter().all(|r| r.pass) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(exit::CHECK_FAILED as u8)
            }
        }
    }
}
