//! Multi-agent GUI automation: action protocol, device simulator, model
//! gateway, execution loop, and the data and personalization pipelines
//! around it.

pub mod action;
pub mod ask;
pub mod datalab;
pub mod events;
pub mod evolve;
pub mod executor;
pub mod gateway;
pub mod knowledge;
pub mod markup;
pub mod orchestration;
pub mod persona;
pub mod reflection;
pub mod sim;
