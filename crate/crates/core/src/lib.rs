//! Desk-scale lab for chain-of-thought fine-tuning followed by triplet-augmented
//! policy optimization on synthetic fine-grained recognition worlds.

pub mod optim;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod vocab;
pub mod world;
pub mod reward;
pub mod sft;
pub mod tapo;
pub mod eval;
pub mod analysis;
pub mod config;
pub mod pipeline;
