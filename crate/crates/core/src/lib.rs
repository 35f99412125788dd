pub mod discovery;
pub mod election;
pub mod membership;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod sim;
pub mod simnet;
