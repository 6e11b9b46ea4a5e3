#![no_main]

use gui_agent::knowledge::parse_doc;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = parse_doc(data, "fuzz.toml");
});
