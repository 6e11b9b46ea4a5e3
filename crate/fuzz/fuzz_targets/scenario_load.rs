#![no_main]

use gui_agent::sim::Scenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = Scenario::load_str(data);
});
