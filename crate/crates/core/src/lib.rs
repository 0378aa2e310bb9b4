pub mod addr;
pub mod cache;
pub mod cap;
pub mod cas;
pub mod config;
pub mod error;
pub mod evset;
pub mod experiments;
pub mod geometry;
pub mod machine;
pub mod mem;
pub mod scenario;
pub mod tenant;
pub mod timing;
mod util;
pub mod vcol;
pub mod vscan;

pub use error::{Error, Result};
