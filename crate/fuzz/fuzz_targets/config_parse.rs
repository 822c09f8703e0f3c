#![no_main]
use libfuzzer_sys::fuzz_target;

use fedvhl::config::parse_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Parsing plus the semantic checks must never panic.
        if let Ok(config) = parse_config(text) {
            let _ = config.validate();
            let _ = config.metrics_path();
            let _ = config.resolved_clients_per_round();
        }
    }
});
