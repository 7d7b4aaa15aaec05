#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = badseg::experiment::ExperimentConfig::from_toml_str(text) {
            let _ = badseg::experiment::validate(&config);
            let _ = badseg::experiment::expand_sweeps(text);
        }
    }
});
