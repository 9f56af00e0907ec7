#![no_main]

use libfuzzer_sys::fuzz_target;
use nsrl_cli::config::{RawConfig, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(raw) = RawConfig::parse(text) {
        let _ = RunConfig::from_raw(&raw);
    }
});
