#![no_main]

use libfuzzer_sys::fuzz_target;
use ssmg_core::checkpoint::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::from_json(text) {
        assert_eq!(Manifest::from_json(&m.to_json()).unwrap(), m);
    }
});
