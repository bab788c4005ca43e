pub mod error;
pub mod harness;
pub mod lin_mpc;
pub mod nav_env;
pub mod nn;
pub mod p2p_sac;
pub mod theorem_oracle;
pub mod qp_oracle;
pub mod reap;

pub use error::{Error, Result};
