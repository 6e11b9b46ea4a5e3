#![no_main]

use gui_agent::evolve::{read_records, QueryRecord, QueueEntry, StepEdit};
use gui_agent::executor::Trajectory;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = read_records::<QueryRecord>(data);
    let _ = read_records::<StepEdit>(data);
    let _ = read_records::<QueueEntry>(data);
    let _ = read_records::<Trajectory>(data);
});
