pub mod coupling;
pub mod empirics;
pub mod error;
pub mod fitting;
pub mod ingest;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
