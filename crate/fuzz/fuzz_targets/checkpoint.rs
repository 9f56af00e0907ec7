#![no_main]

use libfuzzer_sys::fuzz_target;
use nsrl_cli::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ck) = Checkpoint::from_text(text) {
        let _ = ck.model();
        assert_eq!(Checkpoint::from_text(&ck.to_text()).unwrap(), ck);
    }
});
