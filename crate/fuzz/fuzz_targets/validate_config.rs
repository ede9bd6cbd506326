#![no_main]

use diffpo::config::validate_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = validate_config(text) {
        let echoed = cfg.to_toml().expect("valid config serialises");
        assert!(validate_config(&echoed).is_ok());
    }
});
