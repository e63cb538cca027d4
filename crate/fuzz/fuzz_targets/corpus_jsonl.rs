#![no_main]

use libfuzzer_sys::fuzz_target;
use ssmg_data::jsonl;
use ssmg_data::synthetic::SyntheticItem;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(items) = jsonl::parse::<SyntheticItem>(text) {
        let again: Vec<SyntheticItem> = jsonl::parse(&jsonl::to_string(&items).unwrap()).unwrap();
        assert_eq!(again, items);
        for it in &items {
            assert_eq!(it.labels().len(), it.length());
            assert!(it.segments().iter().all(|s| s.end() <= it.length()));
        }
    }
});
