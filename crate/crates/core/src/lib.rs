pub mod distributions;
pub mod effects;
pub mod error;
pub mod inference;
pub mod models;
pub mod random;
pub mod tensor;
