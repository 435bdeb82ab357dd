pub mod analysis;
pub mod dgc;
pub mod error;
pub mod gps;
pub mod quantcore;
pub mod sim;
pub mod stwq;
pub mod synth;
pub mod tensorio;

pub use error::{ErrorCategory, PtqError, Result};
pub use tensorio::{load_tensor, matmul, save_tensor, Tensor};
