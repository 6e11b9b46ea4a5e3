#![no_main]

use gui_agent::action::{parse_action, parse_response};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(r) = parse_response(data) {
        // A reply that parsed carries an action that parses on its own.
        let again = serde_json::to_string(&r.action).unwrap();
        assert_eq!(parse_action(&again).unwrap(), r.action);
    }
});
