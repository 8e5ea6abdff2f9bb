use plink_core::config::ConfigError;
use plink_core::photonsim::SimError;
use plink_core::wire::WireError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("peer handshake rejected: {0}")]
    Handshake(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("output: {0}")]
    Output(String),
    #[error("{0}")]
    Analysis(String),
    #[error("shut down")]
    Shutdown,
}

impl NodeError {
    /// Errors that end the node instead of triggering a reconnect.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            NodeError::Handshake(_)
                | NodeError::Wire(WireError::BadVersion(_))
                | NodeError::Config(_)
                | NodeError::Sim(_)
                | NodeError::Output(_)
                | NodeError::Analysis(_)
                | NodeError::Shutdown
        )
    }

    /// Bad input from the operator rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, NodeError::Config(_))
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        NodeError::Protocol(msg.into())
    }
}
