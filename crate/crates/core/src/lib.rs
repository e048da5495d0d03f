pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod numerics;
pub mod objectives;
pub mod retrieval_eval;
pub mod seeding;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
