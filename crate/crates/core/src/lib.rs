pub mod backend;
pub mod certify;
pub mod commands;
pub mod error;
pub mod grid;
pub mod io;
pub mod maskgen;
pub mod metrics;
pub mod oracle;
pub mod scene;

pub use error::{Error, Result};
