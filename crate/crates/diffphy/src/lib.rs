//! Physics-aware fine-tuning toolkit for a toy video diffusion model:
//! prompt-side physical-context reasoning, a differentiable expected-score
//! verifier, physics losses, a small DiT with LoRA and a gated injection
//! branch, a trainer, an evaluation harness, and a dataset curation
//! pipeline, all deterministic and driven by mock language/vision backends.

pub mod config;
pub mod context;
pub mod dataset;
pub mod dit;
pub mod error;
pub mod eval;
pub mod inject;
pub mod llm;
pub mod losses;
pub mod score;
pub mod tensor;
pub mod util;
pub mod verifier;

pub mod trainer;

pub use error::{Error, Result};
