#![no_main]

use capture_core::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = ExperimentConfig::from_toml_str(text, Path::new("/nonexistent"));
});
