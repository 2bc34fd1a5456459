#![no_main]

use libfuzzer_sys::fuzz_target;
use solvegp::model::Model;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((model, stats)) = Model::from_json(text) {
            let saved = model.to_json(stats.as_ref()).unwrap();
            let (back, stats_back) = Model::from_json(&saved).unwrap();
            assert_eq!(back, model);
            assert_eq!(stats_back, stats);
        }
    }
});
