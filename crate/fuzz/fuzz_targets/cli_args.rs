#![no_main]

use clap::Parser;
use libfuzzer_sys::fuzz_target;
use smpc_cli::{load_config, Cli, Command};

// Arguments are NUL-separated. Only presets are loaded; file paths are not touched.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let args = std::iter::once("smpc").chain(text.split('\0'));
    let Ok(cli) = Cli::try_parse_from(args) else { return };
    if let Command::Run(run) = cli.command {
        if run.config.is_none() {
            let _ = load_config(&run);
        }
    }
});
