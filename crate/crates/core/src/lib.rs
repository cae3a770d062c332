pub mod bag;
pub mod behaviour;
pub mod deploy_star;
pub mod fold;
pub mod ops;
pub mod priority;
pub mod stream;
pub mod value;
pub mod reactor;
pub mod trace;
pub mod actor;
pub mod flock;
pub mod net;
pub mod geo;
pub mod bench;
pub mod scenario;
