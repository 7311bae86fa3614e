#![no_main]

use libfuzzer_sys::fuzz_target;
use mckv::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ExperimentConfig::from_json(text) {
        // An accepted config must survive its own round trip.
        let again = ExperimentConfig::from_json(&config.reproducible_json()).expect("round trip");
        assert_eq!(again.reproducible_json(), config.reproducible_json());
    }
});
