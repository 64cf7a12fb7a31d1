pub mod belief;
pub mod bench;
pub mod engine;
pub mod error;
pub mod evolution;
pub mod filters;
pub mod linalg;
pub mod recognition;
pub mod scalar;
