#![no_main]

use libfuzzer_sys::fuzz_target;
use nvl_core::corpus::wav;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = wav::read_from(data) {
        assert!(w.samples().iter().all(|s| s.is_finite() && s.abs() <= 1.0));
    }
});
