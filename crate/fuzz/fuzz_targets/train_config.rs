#![no_main]

use libfuzzer_sys::fuzz_target;
use ssmg_harness::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = TrainConfig::from_json(text) {
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    }
});
