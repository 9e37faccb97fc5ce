//! Training-free human-object-interaction image generation.
//!
//! The pipeline couples a denoising backbone with visual-language-model
//! agents in three stages:
//!
//! 1. **Coarse generation** ([`coarse`]): k candidate images denoised with
//!    dual prompt streams, substituting attention maps from an intransitive
//!    prompt so the verb renders faithfully.
//! 2. **Reasoning** ([`agents`]): a pose-selection agent picks the best
//!    candidate; a layout agent proposes where the object belongs, seeded
//!    with detected keypoints, the human box and the attention-derived
//!    object box.
//! 3. **Correction** ([`corrector`]): the chosen candidate is re-denoised
//!    under inverse-mask attention gating and box-constrained latent
//!    updates until the object lands in the proposed box.
//!
//! Everything runs deterministically on the bundled toy backbone and mock
//! VLM; real model adapters plug in behind the [`backbone::Backbone`] and
//! [`agents::vlm::VlmClient`] traits.

pub mod agents;
pub mod attention;
pub mod backbone;
pub mod coarse;
pub mod config;
pub mod corrector;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod prompt;
pub mod runner;

pub use error::{Error, Result};
