//! Alice/Bob node runtime, the framed peer protocol, and the HTTP/JSON
//! operations service.

pub mod api;
pub mod audit;
pub mod error;
pub mod node;
pub mod ops;
pub mod output;
pub mod protocol;
pub mod source;
pub mod status;
pub mod transport;

pub use error::NodeError;
