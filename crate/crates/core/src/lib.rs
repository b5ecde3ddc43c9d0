pub mod embedding;
pub mod error;
pub mod linalg;
pub mod attention;
pub mod circuit;
pub mod reference;
pub mod wma_circuit;
pub mod qlearn_circuit;
pub mod envs;
pub mod harness;
pub mod protocol;
