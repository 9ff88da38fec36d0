pub mod dcp;
pub mod diffnum;
pub mod domain;
pub mod envs;
pub mod error;
pub mod harness;
pub mod ppo;
pub mod sysid;

pub use error::{Error, Result};
