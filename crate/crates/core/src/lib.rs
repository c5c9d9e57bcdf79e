//! A desk-scale goal-misgeneralisation laboratory.
//!
//! A deterministic grid platformer with a coin, lava and monsters; PPO
//! agents trained from scratch on a small dense network; a pair of
//! diversified reward-hypothesis heads trained on labeled training
//! transitions and unlabeled shifted observations; a one-bit disambiguation
//! step; and a harness that measures whether an agent pursues the coin or
//! merely the right edge of the level.

pub mod env;
pub mod level;
pub mod levelgen;
pub mod obs;
pub mod nn;
pub mod checkpoint;
pub mod episode;
pub mod ppo;
pub mod extrapolate;
pub mod disambiguate;
pub mod harness;
pub mod config;
pub mod pipeline;
