#![no_main]

use gui_agent::ask::parse_trust;
use gui_agent::markup::{all_tags, find_tag};
use gui_agent::reflection::parse_verdict;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    for name in ["thinking", "summary", "action", "question", "verdict"] {
        if let Some(span) = find_tag(data, name) {
            assert!(data.get(span.start..span.end).is_some());
        }
        let _ = all_tags(data, name);
    }
    let _ = parse_verdict(data);
    let _ = parse_trust(data);
});
