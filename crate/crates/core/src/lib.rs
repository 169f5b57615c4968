//! Geometric hybrid model predictive control for a 3D hopping robot.
//!
//! The crate is organized bottom-up:
//!
//! - [`geom`]: unit quaternions as a Lie group, exp/log maps, Lie-Euler steps
//! - [`dynamics`]: the hopper model, guards and impact maps
//! - [`hybrid`]: event-detecting simulation of the hybrid system
//! - [`linearization`]: affine models in exponential coordinates
//! - [`qp`]: dense ADMM solver for box- and equality-constrained QPs
//! - [`mpc`]: mode scheduling, FTOCP assembly and the SQP loop
//! - [`lowlevel`]: 1 kHz quaternion PD, foot loop and multi-rate runtime

pub mod dynamics;
pub mod error;
pub mod geom;
pub mod hybrid;
pub mod linearization;
pub mod lowlevel;
pub mod mpc;
pub mod qp;

pub use error::{Error, Result};
