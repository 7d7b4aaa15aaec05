#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = toml::from_str::<badseg::trigger::TriggerSpec>(text) {
            let _ = spec.validate();
        }
    }
});
