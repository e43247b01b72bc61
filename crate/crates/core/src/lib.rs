pub mod codec;
pub mod data;
pub mod exec;
pub mod forest;
pub mod mlr;
mod seed;
pub mod surrogate;
