pub mod augment;
pub mod bandforge;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod segnet;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
