#![no_main]

use gui_agent::datalab::read_jsonl;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = read_jsonl(data);
});
