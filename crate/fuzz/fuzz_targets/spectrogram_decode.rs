#![no_main]

use libfuzzer_sys::fuzz_target;
use nvl_core::dsp::Spectrogram;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = Spectrogram::decode(data) {
        let bytes = s.encode();
        assert_eq!(Spectrogram::decode(&bytes).expect("re-encoded spectrogram decodes").encode(), bytes);
    }
});
