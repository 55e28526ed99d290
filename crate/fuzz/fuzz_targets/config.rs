#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use reid_cli::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::parse(text, Path::new("/fuzz")) {
        let canonical = cfg.canonical_json();
        let again = ExperimentConfig::parse(&canonical, Path::new("/elsewhere")).expect("canonical form parses");
        assert_eq!(again, cfg);
    }
});
