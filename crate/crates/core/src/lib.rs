pub mod diffcore;
pub mod distributions;
pub mod model;
pub mod objectives;
pub mod data;
pub mod trainer;
pub mod baseline;
pub mod eval;
pub mod config;
pub mod cli;
