//! Simulation and diffusion-limit verification for closed two-level
//! queueing networks.
//!
//! The network moves a fixed population of jobs between two layers:
//! single-server stations whose service rates are sped up linearly with
//! the population scale, and infinite-server stations where every job
//! present is served in parallel. Routing between the layers is Markovian.
//! Under critical loading the queue lengths and centered occupancies,
//! viewed on the diffusion scale, converge to a reflected Gaussian system
//! driven by a Brownian motion and a nonlinear regulator map.
//!
//! The crate provides, in dependency order:
//!
//! * [`netmodel`]: network parameters, validation, critical-load checks;
//! * [`simulator`]: exact continuous-time Markov chain simulation with
//!   grid snapshots of all counting processes;
//! * [`scaling`]: diffusion and fluid rescalings of simulated paths, and
//!   extraction of the martingale ("free") components;
//! * [`regulator`]: the one-sided reflection map and the nonlinear
//!   regulator fixed-point solver on a time grid;
//! * [`limitproc`]: the limit covariance, Brownian path sampling, and
//!   sampling of the reflected limit process;
//! * [`harness`]: pathwise oracle checks, empirical covariance
//!   estimation, and the simulation-vs-limit convergence experiment;
//! * [`io`] and [`cli`]: CSV/JSON persistence and the `htnet` command
//!   line tool built on top of it.

pub mod cli;
pub mod harness;
pub mod io;
pub mod limitproc;
pub mod netmodel;
pub mod regulator;
pub mod scaling;
pub mod simulator;

pub use netmodel::{NetworkConfig, NetworkParams};
pub use regulator::{RegulatorInput, RegulatorOutput};
pub use scaling::{GridPath, ScaledBundle};
pub use simulator::PathRecord;
