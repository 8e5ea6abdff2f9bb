pub mod api;
pub mod bits;
pub mod cascade;
pub mod channel;
pub mod config;
pub mod metrics;
pub mod photonsim;
pub mod privamp;
pub mod qstate;
pub mod scenario;
pub mod sifting;
pub mod timing;
pub mod wire;
