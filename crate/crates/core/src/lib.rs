//! Advisor-guided DQN training for highway driving with discriminator reward
//! shaping, retrieval-augmented episodic memory and a collision-risk safety
//! gate.

pub mod advisor;
pub mod agent;
pub mod api;
pub mod disc;
pub mod harness;
pub mod memory;
pub mod net;
pub mod safety;
pub mod scene;
pub mod sim;

#[cfg(test)]
mod testutil;
