pub mod adaptation;
pub mod error;
pub mod harness;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod par;
pub mod topk;
pub mod vocab_align;

pub use error::{Error, Result};
