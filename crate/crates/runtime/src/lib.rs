pub mod api;
pub mod bench;
pub mod catalog;
pub mod cli;
pub mod config;
pub mod session;
pub mod store;
