pub mod cli;
pub mod config;
pub mod costs;
pub mod dsm;
pub mod dynamics;
pub mod eqprop;
pub mod error;
pub mod experiments;
pub mod oracle;
pub mod rng;
pub mod substrate;
