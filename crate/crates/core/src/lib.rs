pub mod certified;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod integrator;
pub mod lyapunov;
pub mod region;
pub mod ucb;

pub use error::{Error, Result};
