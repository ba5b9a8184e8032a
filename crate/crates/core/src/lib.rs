pub mod attention;
pub mod backbone;
pub mod error;
pub mod evalkit;
pub mod flow;
pub mod lora;
pub mod tensor;
pub mod toydata;

pub use error::{Error, Result};
