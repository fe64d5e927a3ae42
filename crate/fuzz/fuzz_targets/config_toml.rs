#![no_main]

use libfuzzer_sys::fuzz_target;
use seqmatch::config::TrainingConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = TrainingConfig::from_toml_str(text);
    }
});
