//! Steering: the session actor that owns the scene, the wire protocol, the
//! network front ends and detached batch runs.

pub mod batch;
pub mod net;
pub mod protocol;
pub mod session;

pub use batch::{run_batch, run_standalone, BatchError, BatchSpec, BatchSummary};
pub use net::{Server, ServerConfig, TcpClient};
pub use protocol::{BatchState, ClientMsg, ErrorCode, Outgoing, ServerMsg, StyleOptions, Technique};
pub use session::{Client, ClientQueue, Session, SessionConfig};

/// Environment variable holding the shared steering token.
pub const TOKEN_ENV: &str = "STEERFLOW_TOKEN";
