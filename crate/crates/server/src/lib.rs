//! Live session server: runs one simulation at a fixed tick rate and streams
//! state, ghost layers and metrics to clients over newline-delimited JSON,
//! while accepting disruption, label and control commands.

pub mod protocol;
mod server;
pub mod session;

pub use server::{serve, ServeOptions, ServerError, ServerHandle, CLIENT_QUEUE};
pub use session::{ClientId, Mode, Outbox, Session, Target};
