//! Core of the superoptimization lab: the MiniASM language, its interpreter,
//! test-suite generation, the bounded equivalence verifier, the latency cost
//! model and the synthetic compiler-pair corpus.

pub mod isa;
pub mod machine;
pub mod testgen;
pub mod verify;
pub mod cost;
pub mod datagen;
pub mod mutate;
