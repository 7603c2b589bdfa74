#![no_main]

use libfuzzer_sys::fuzz_target;
use nvl_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        assert_eq!(RunConfig::parse(&cfg.to_toml()).expect("written config parses"), cfg);
    }
});
