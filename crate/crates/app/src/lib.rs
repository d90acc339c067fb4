//! Application library: the webhook inference service, payload signing,
//! and the remote chat-completion backend. The `depscreen` binary wires
//! these behind the CLI.

pub mod remote;
pub mod service;
pub mod webhook;
