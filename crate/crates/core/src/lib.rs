//! Treatment-controlled trait and population dynamics on a fitness landscape:
//! equilibria of the slow-fast system, controllable sets bounded by extremal
//! orbits, verification utilities and L1-optimal periodic dosing.

pub mod analysis;
pub mod config;
pub mod control;
pub mod dynamics;
pub mod equilibria;
pub mod error;
pub mod geometry;
pub mod landscape;
pub mod ode;
pub mod omega;

pub use dynamics::{flow, FlowOptions, Schedule, State, System, TerminalStatus, Trajectory};
pub use error::{Error, Result};
pub use landscape::{preset, Landscape, Preset, Window};
