#![no_main]

use libfuzzer_sys::fuzz_target;
use nsrl::envs::blocks::{parse_piles, render_piles};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(piles) = parse_piles(text) {
        assert_eq!(parse_piles(&render_piles(&piles)).unwrap(), piles);
    }
});
