pub mod case_study;
pub mod cl;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod prescale;
pub mod rng;
pub mod trace;
pub mod verify;

pub use error::{Error, Result};
