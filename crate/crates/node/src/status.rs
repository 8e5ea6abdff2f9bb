pub use plink_core::api::NodeStatus;
use std::sync::{Arc, RwLock};

pub type SharedStatus = Arc<RwLock<NodeStatus>>;
