//! A numerical laboratory for stochastic mechanics with a complex diffusion
//! parameter `alpha = |alpha| e^{i phi}`: Brownian motion at `phi = 0`,
//! quantum mechanics at `phi = pi/2`.

pub mod correspond;
pub mod error;
pub mod geom2;
pub mod potential;
pub mod relsim;
pub mod noise;
pub mod params;
pub mod pde;
pub mod stats;
pub mod stochcalc;
pub mod verify;

pub use error::{Error, Result};
pub use params::{Axis, DiffusionSpec, Regime, SeedSpec, SpaceGrid, TimeGrid};
