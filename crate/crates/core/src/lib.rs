//! A web of authenticated blocks whose availability and integrity are
//! attested by separate sets of servers.

pub mod bank;
pub mod block;
pub mod chains;
pub mod client;
pub mod codec;
pub mod consensus;
pub mod crypto;
pub mod fern;
pub mod harness;
pub mod merkle;
pub mod message;
pub mod net;
pub mod policy;
pub mod service;
pub mod sim;
pub mod timestamp;
pub mod wilbur;
pub mod world;
