#![no_main]

use gui_agent::gateway::Script;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = Script::load_str(data);
});
