#![no_main]

use libfuzzer_sys::fuzz_target;
use solvegp::run::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_json(text) {
            let again = serde_json_round_trip(&cfg);
            assert_eq!(again, cfg);
        }
    }
});

fn serde_json_round_trip(cfg: &RunConfig) -> RunConfig {
    let text = serde_json::to_string(cfg).unwrap();
    RunConfig::from_json(&text).unwrap()
}
