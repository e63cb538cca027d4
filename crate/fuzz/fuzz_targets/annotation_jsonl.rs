#![no_main]

use libfuzzer_sys::fuzz_target;
use ssmg_data::annotation::{merge_corpus, one_to_many, AnnotationItem, OverlapRule, MERGE_RATIO};
use ssmg_data::jsonl;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(items) = jsonl::parse::<AnnotationItem>(text) else {
        return;
    };
    let merged = merge_corpus(&items, MERGE_RATIO, OverlapRule::Min).unwrap();
    for it in &merged {
        it.validate().unwrap();
    }
    assert_eq!(merge_corpus(&merged, MERGE_RATIO, OverlapRule::Min).unwrap(), merged);
    let consolidated = one_to_many(&items);
    assert_eq!(one_to_many(&consolidated), consolidated);
});
