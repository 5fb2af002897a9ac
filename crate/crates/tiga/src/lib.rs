pub mod checker;
pub mod config;
pub mod coordinator;
pub mod hash;
pub mod message;
pub mod server;
pub mod sim;
pub mod stats;
pub mod store;
pub mod types;
pub mod view_manager;
pub mod workload;
pub mod world;
