//! Desk-scale vision-language-action training stack.
//!
//! The crate is organized around a small reverse-mode autodiff kernel
//! ([`tensor`]), a deterministic synthetic mobile-manipulation world
//! ([`world`]), the perception/backbone/decoder/flow model stack, a
//! three-stage trainer with exact gradient gating, and an evaluation
//! bench that mirrors the ablation grid.

pub mod backbone;
pub mod decoders;
pub mod eval;
pub mod flow;
pub mod perception;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod world;
