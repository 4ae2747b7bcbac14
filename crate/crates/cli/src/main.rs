use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use smbforge::config::{parse_config, ConfigError, Mode};
use smbforge::run::{error_report, run, RunOptions};

/// Ion-exchange batch and SMB chromatography simulation and design.
#[derive(Debug, Parser)]
#[command(name = "smbforge", version)]
struct Cli {
    mode: Mode,
    /// Run configuration (JSON, `"schema": 1`).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for chains and ensemble members.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = parse_config(&cli.config, cli.mode).map_err(anyhow::Error::from).and_then(|mut cfg| {
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let opts = RunOptions { out: cli.out.clone(), threads: cli.threads, config_path: Some(cli.config.clone()) };
        run(cli.mode, &cfg, &opts)
    });
    match result {
        Ok(m) => {
            eprintln!("{}: wrote {} files to {} in {:.1} s", m.mode, m.files.len(), cli.out.display(), m.wall_time_s);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = error_report(cli.mode, &e);
            eprintln!("{}", serde_json::to_string_pretty(&report).unwrap());
            let config_error = e.downcast_ref::<ConfigError>().is_some();
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
