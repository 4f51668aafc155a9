pub mod chain_sim;
pub mod clock;
pub mod faults;
pub mod fetcher;
pub mod journal;
pub mod registry;
pub mod schema;
pub mod types;
pub mod store;
pub mod integrity;
pub mod dispatcher;
pub mod sync;
