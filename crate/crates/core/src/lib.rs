pub mod backbone;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod lexicon;
pub mod numeric;
pub mod pipeline;
pub mod seed;
pub mod steering;
pub mod synthtask;
pub mod tensorfile;

pub use error::{Error, Result};
