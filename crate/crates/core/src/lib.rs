//! Embedding narrow networks into wider ones and inspecting the critical
//! points they produce.

pub mod embedding;
pub mod experiment;
pub mod landscape;
pub mod network;
pub mod numerics;

#[cfg(test)]
pub(crate) mod testutil;
