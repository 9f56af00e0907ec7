#![no_main]

use libfuzzer_sys::fuzz_target;
use nsrl::envs::blocks::vocabulary;
use nsrl::envs::Task;
use nsrl::symbolic::syntax::parse_atom;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(atom) = parse_atom(text) {
        assert_eq!(parse_atom(&atom.to_string()).unwrap(), atom);
    }
    let vocab = vocabulary(Task::On);
    if let Ok(atom) = vocab.parse_atom(text) {
        assert_eq!(vocab.parse_atom(&vocab.render(&atom)).unwrap(), atom);
    }
});
