#![no_main]

use libfuzzer_sys::fuzz_target;
use smpc_core::config::{ExperimentConfig, VariantSelection};
use smpc_core::smpc::ControllerVariant;

fuzz_target!(|data: &[u8]| {
    let Ok(name) = std::str::from_utf8(data) else { return };
    if let Ok(v) = name.parse::<ControllerVariant>() {
        assert_eq!(v.name().parse::<ControllerVariant>().unwrap(), v);
    }
    let _ = name.parse::<VariantSelection>();
    let _ = ExperimentConfig::preset(name);
});
