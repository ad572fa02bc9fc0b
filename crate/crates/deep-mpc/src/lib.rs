//! Self-adaptive robust control stack for uncertain nonlinear systems:
//! a modified state observer that learns plant uncertainty online with a
//! sign-only weight update law, a dynamic-inversion control law, a robust
//! setpoint-tracking MPC with geometrically tightened constraints, and a
//! value-learning outer loop, exercised on analytic planar manipulators
//! under timed external-force disturbances.

pub mod adaptive;
pub mod approximator;
pub mod arm;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod observer;
pub mod parallel;
pub mod plant;
pub mod qp;
pub mod rmpc;

pub use error::{Error, Result};
