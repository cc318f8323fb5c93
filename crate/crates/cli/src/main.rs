use std::process::ExitCode;

use clap::Parser;
use smpc_cli::{render_table, run, Cli, Command};
use smpc_core::config::ExperimentConfig;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preset { name } => ExperimentConfig::preset(&name)
            .map(|cfg| println!("{}", cfg.to_json()))
            .map_err(Into::into),
        Command::Run(args) => run(&args).map(|report| {
            print!("{}", render_table(&report.summary));
            println!("wrote {}", report.out_dir.display());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
