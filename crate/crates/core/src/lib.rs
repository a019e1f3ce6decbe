pub mod decode;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
