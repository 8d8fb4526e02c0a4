pub mod array;
pub mod channel;
pub mod crlb;
pub mod dict;
pub mod error;
pub mod experiment;
pub mod io;
pub mod measurement;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
