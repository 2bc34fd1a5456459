#![no_main]

use libfuzzer_sys::fuzz_target;
use solvegp::data::parse_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(raw) = parse_csv(data, "y") {
        assert_eq!(raw.x.nrows(), raw.y.len());
        assert_eq!(raw.x.ncols(), raw.feature_names.len());
        assert!(raw.x.iter().chain(raw.y.iter()).all(|v| v.is_finite()));
    }
});
