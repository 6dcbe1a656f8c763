pub mod bdsde;
pub mod doss;
pub mod error;
pub mod generators;
pub mod harness;
pub mod norms;
pub mod oracles;
pub mod paths;
pub mod quadrature;
pub mod reflected;
pub mod stepper;
pub mod tbdsde;

pub use error::{Error, Result};
