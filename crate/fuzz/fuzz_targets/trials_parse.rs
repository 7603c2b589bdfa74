#![no_main]

use libfuzzer_sys::fuzz_target;
use nvl_core::eval::{format_trials, parse_trials};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = parse_trials(text) {
        assert_eq!(parse_trials(&format_trials(&t)).expect("written trials parse"), t);
    }
});
