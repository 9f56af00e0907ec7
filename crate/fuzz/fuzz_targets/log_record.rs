#![no_main]

use libfuzzer_sys::fuzz_target;
use nsrl_cli::log::parse_log;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_log(text) {
        let again: String = records.iter().map(|r| r.to_line() + "\n").collect();
        assert_eq!(parse_log(&again).unwrap(), records);
    }
});
