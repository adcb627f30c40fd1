pub mod datagen;
pub mod error;
pub mod experiment;
pub mod fab;
pub mod fab_online;
pub mod gaussian;
pub mod incremental;
pub mod io;
pub mod mixture;
pub mod trace;

pub use error::{Error, Result};
