#![no_main]

use gui_agent::action::{parse_action, ActionKind, SystemButton};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = parse_action(data);
    let _ = ActionKind::parse(data);
    let _ = SystemButton::parse(data);
});
