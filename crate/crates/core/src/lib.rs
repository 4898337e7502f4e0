pub mod error;
pub mod experiments;
pub mod fixtures;
pub mod interlacements;
pub mod io;
pub mod late;
pub mod potential;
pub mod surgery;
pub mod torus;
pub mod walk;

pub use error::{Error, Result};
