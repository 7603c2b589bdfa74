#![no_main]

use libfuzzer_sys::fuzz_target;
use nvl_core::eval::{format_scores, parse_scores};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = parse_scores(text) {
        let out = format_scores(&s);
        assert_eq!(format_scores(&parse_scores(&out).expect("written scores parse")), out);
    }
});
