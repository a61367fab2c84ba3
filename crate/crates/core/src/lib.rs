//! Flow-based fulfillment middleware for chatbot action servers.
//!
//! A dialog manager calls the action webhook; the request runs through a
//! wired graph of nodes (declared in a flow file) that call external APIs,
//! compose bot responses and set slots.

pub mod engine;
pub mod flow;
pub mod harness;
pub mod nodes;
pub mod protocol;
pub mod server;
pub mod template;
