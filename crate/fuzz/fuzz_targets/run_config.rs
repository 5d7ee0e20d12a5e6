#![no_main]

use libfuzzer_sys::fuzz_target;
use roadcast::cli::{RunConfig, RunConfigFile};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(layer) = RunConfigFile::parse(text, "fuzz") else {
        return;
    };
    if let Ok(cfg) = RunConfig::resolve(&layer) {
        let written = cfg.to_layer().to_toml();
        let back = RunConfigFile::parse(&written, "rewritten").expect("manifest parses");
        assert_eq!(RunConfig::resolve(&back).expect("manifest resolves"), cfg);
    }
});
