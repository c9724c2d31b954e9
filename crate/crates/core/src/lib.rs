//! Ocean plastic collector: a procedurally generated 2-D multi-agent environment
//! where vessels collect floating garbage pebbles, optionally exchanging a one-bit
//! signal with their nearest neighbour, trained with a shared PPO-Clip policy.
//!
//! Module map:
//!
//! - [`scenario`]: seeded Perlin density fields, pebble and vessel spawning.
//! - [`world`]: vessel physics, collection, rewards, termination, observations.
//! - [`commnet`]: proximity graph, nearest-neighbour signal visibility, message passing.
//! - [`policy`]: the shared actor-critic network with hand-written backprop.
//! - [`optim`]: GAE, the clipped surrogate, and the minibatch Adam update.
//! - [`trainer`]: rollout areas, seed schedules, checkpoints, training and evaluation loops.
//! - [`evalkit`]: replay logs, communication metrics, reports, and path plots.

pub mod commnet;
pub mod error;
pub mod evalkit;
pub mod optim;
pub mod policy;
pub mod scenario;
pub mod seeding;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
