//! Physics-informed gated recurrent network (PiGRN) for estimating shoulder
//! and elbow kinematics, hand load and joint torques from EMG envelopes.

pub mod commands;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod signal;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
