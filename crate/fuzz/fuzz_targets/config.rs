#![no_main]

use libfuzzer_sys::fuzz_target;
use tfcse::experiment::{ExperimentConfig, SynthConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        if cfg.validate().is_ok() {
            assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }
    if let Ok(cfg) = SynthConfig::from_toml(text) {
        let _ = cfg.scene.validate();
    }
});
