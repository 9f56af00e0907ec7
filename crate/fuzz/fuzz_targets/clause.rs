#![no_main]

use libfuzzer_sys::fuzz_target;
use nsrl::envs::blocks::vocabulary;
use nsrl::envs::Task;
use nsrl::rules::{parse_report_line, Clause};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let vocab = vocabulary(Task::On);
    if let Ok(clause) = Clause::parse(text, &vocab) {
        assert_eq!(Clause::parse(&clause.render(&vocab), &vocab).unwrap(), clause);
    }
    let _ = parse_report_line(text, &vocab);
});
