pub mod checkpoint;
pub mod config;
pub mod distributions;
pub mod envs;
pub mod estlab;
pub mod experiments;
pub mod gradcheck;
pub mod gradcore;
pub mod policy;
pub mod rng;
pub mod stats;
pub mod trainer;
