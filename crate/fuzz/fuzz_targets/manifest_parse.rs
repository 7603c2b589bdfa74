#![no_main]

use libfuzzer_sys::fuzz_target;
use nvl_core::corpus::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::parse(text) {
        let tsv = m.to_tsv();
        assert_eq!(Manifest::parse(&tsv).expect("written manifest parses").to_tsv(), tsv);
    }
});
