#![no_main]

use libfuzzer_sys::fuzz_target;
use nvl_core::eval::Report;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = Report::parse(text) {
        let out = r.to_text();
        assert_eq!(Report::parse(&out).expect("written report parses").to_text(), out);
    }
});
