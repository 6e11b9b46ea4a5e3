#![no_main]

use gui_agent::sim::Predicate;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = Predicate::parse(data);
});
