//! Image-attention amplification and contrastive logit refinement for a
//! small deterministic multimodal decoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`attention`]: dense causal attention, softmax, and the pre-softmax
//!   span amplification primitive.
//! - [`model`]: a seeded decoder-only transformer with a stub image
//!   projector, prompt assembly, and traced forward passes.
//! - [`intervention`]: layer gating and the attention hook that amplifies
//!   the image span of the last query row.
//! - [`decoding`]: greedy, beam, and nucleus generation over a conditioned
//!   stream and an image-free stream combined in logit space.
//! - [`chair`], [`pope`], [`inertia`]: hallucination metrics and the
//!   text-inertia probe.
//! - [`report`]: attention-ratio reporting over generation traces.

pub mod attention;
pub mod chair;
pub mod decoding;
pub mod error;
pub mod inertia;
pub mod intervention;
pub mod jsonl;
pub mod model;
pub mod pope;
pub mod report;
pub mod seed;
pub mod vocab;

pub use error::{Error, Result};

/// Token identifier in a model vocabulary.
pub type TokenId = u32;

/// Version tag embedded in every serialized report.
pub const SCHEMA_VERSION: &str = "steer.v1";
