pub mod adapter;
pub mod format;
pub mod ops;
pub mod ratings;
pub mod rng;
pub mod tensor;
pub mod rl;
pub mod dsl;
pub mod env;
pub mod diagnostics;
pub mod engine;
