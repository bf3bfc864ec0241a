//! Autoregressive generation of 3-D molecular equilibrium structures.
//!
//! A feature extractor over partially placed molecules emits, per placed
//! atom, a binned probability distribution over the distance to the atom
//! being placed next. Multiplying those distributions over a fixed
//! spatial grid yields a normalized probability field over candidate
//! positions, so molecules are built one atom at a time. Training uses
//! teacher forcing with smoothed distance targets and summed
//! cross-entropy over whole placement trajectories.

pub mod analysis;
pub mod autodiff;
pub mod bins;
pub mod chem;
pub mod config;
pub mod encoder;
pub mod head;
pub mod loss;
pub mod params;
pub mod real;
pub mod sampler;
pub mod selfcheck;
pub mod train;
