//! Slot-level Wi-Fi contention simulator with a diffusion-policy MAC
//! controller: tiny dense-network kernel, diffusion sampler, actor-critic
//! agents, the channel-access simulator, the control environment around it,
//! and the experiment harness.

pub mod agent;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod harness;
pub mod macsim;
pub mod nn;
