pub mod config;
pub mod error;
pub mod linalg;
pub mod model;
pub mod prs;
pub mod qp;
pub mod sim;
pub mod smpc;

pub use error::{Error, Result};
