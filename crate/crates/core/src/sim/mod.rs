//! Deterministic mobile-device simulator.

mod env;
mod log;
pub mod predicate;
pub mod scenario;

pub use env::{EnvError, EnvErrorRecord, EnvOutcome, Environment, OutcomeStatus, ScreenSnapshot, Widget};
pub use log::{replay, LogRecord, TrajectoryLog};
pub use predicate::{Predicate, StateValue};
pub use scenario::{
    ActionForm, Ambiguity, BBox, Equivalence, Scenario, ScenarioError, ScreenRef, SwipeDirection, TaskDef, WidgetKind,
};
