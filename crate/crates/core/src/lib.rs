pub mod confidence;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod graph;
pub mod grid;
pub mod packing;
pub mod protocol;
pub mod rng;
pub mod scenarios;
pub mod wire;
pub mod world;
