#![no_main]

use libfuzzer_sys::fuzz_target;
use smpc_core::config::ExperimentConfig;

// Validation must reject bad configurations with an error, never a panic.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ExperimentConfig::from_json(text) else {
        return;
    };
    if cfg.system.a.len() > 6 || cfg.controller.n > 30 {
        return;
    }
    for variant in cfg.variants() {
        let _ = cfg.smpc_config(variant);
    }
});
