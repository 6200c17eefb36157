//! Contrastive dual-encoder training with image and text hard negatives.

pub mod numerics;
pub mod toyworld;
pub mod model;
pub mod losses;
pub mod eval;
pub mod harness;
