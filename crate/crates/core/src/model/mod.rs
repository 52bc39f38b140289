//! A small seeded decoder-only transformer with a stub image projector.
//!
//! Blocks are pre-norm: RMS normalisation, causal multi-head attention with
//! a residual connection, then RMS normalisation and a two-layer SiLU MLP
//! with 4x expansion. Positions use a learned (here: seeded) embedding
//! table.
//!
//! # Weight scheme
//!
//! Tensors are generated in [`Model::tensor_names`] order. Tensor `t` draws
//! from `ChaCha8Rng::seed_from_u64(seed)` switched to stream `t`; matrices
//! are uniform in `[-1/√d_model, 1/√d_model]`, normalisation gains are 1 and
//! biases are 0. The same ordering is used for the flat little-endian `f32`
//! weight blob written by [`Model::save`].

mod forward;
mod io;
mod prompt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use forward::{
    forward, layer_similarity, AttentionHook, ForwardTrace, FullTrace, LanguageModel,
    LayerSimilarity, NoHook,
};
pub use io::{ModelManifest, TensorInfo};
pub use prompt::{assemble_prompt, project_image, Category, ImageDescriptor, Prompt, PromptLayout};

pub const BOS_ID: crate::TokenId = 0;
pub const EOS_ID: crate::TokenId = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
    /// Width of raw image features fed to the projector; defaults to `d_model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
}

impl ModelConfig {
    /// The reference fixture: 2 layers, 2 heads, width 32, 64 tokens, seed 7.
    pub fn fixture() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_head: 16,
            vocab_size: 64,
            max_seq: 1024,
            seed: 7,
            feature_dim: None,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.feature_dim.unwrap_or(self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be at least 1"));
        }
        if self.n_heads == 0 {
            return Err(Error::config("n_heads", "must be at least 1"));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "d_model",
                format!("{} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.d_head != self.d_model / self.n_heads {
            return Err(Error::config(
                "d_head",
                format!("must equal d_model / n_heads = {}", self.d_model / self.n_heads),
            ));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must include BOS and EOS"));
        }
        if self.max_seq == 0 {
            return Err(Error::config("max_seq", "must be at least 1"));
        }
        if self.feature_width() == 0 {
            return Err(Error::config("feature_dim", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_up: Vec<f32>,
    pub b_up: Vec<f32>,
    pub w_down: Vec<f32>,
    pub b_down: Vec<f32>,
}

/// Immutable model weights. Safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub(crate) token_embedding: Vec<f32>,
    pub(crate) position_embedding: Vec<f32>,
    pub(crate) projector: Vec<f32>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) final_norm: Vec<f32>,
    pub(crate) lm_head: Vec<f32>,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Ones,
    Zeros,
}

/// Shape and initialiser of each tensor, in blob order.
fn tensor_plan(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let ff = 4 * d;
    let mut plan = vec![
        ("token_embedding".to_string(), vec![cfg.vocab_size, d], Init::Uniform),
        ("position_embedding".to_string(), vec![cfg.max_seq, d], Init::Uniform),
        ("projector".to_string(), vec![cfg.feature_width(), d], Init::Uniform),
    ];
    for l in 0..cfg.n_layers {
        let p = |name: &str| format!("layers.{l}.{name}");
        plan.extend([
            (p("attn_norm"), vec![d], Init::Ones),
            (p("wq"), vec![d, d], Init::Uniform),
            (p("wk"), vec![d, d], Init::Uniform),
            (p("wv"), vec![d, d], Init::Uniform),
            (p("wo"), vec![d, d], Init::Uniform),
            (p("mlp_norm"), vec![d], Init::Ones),
            (p("w_up"), vec![d, ff], Init::Uniform),
            (p("b_up"), vec![ff], Init::Zeros),
            (p("w_down"), vec![ff, d], Init::Uniform),
            (p("b_down"), vec![d], Init::Zeros),
        ]);
    }
    plan.push(("final_norm".to_string(), vec![d], Init::Ones));
    plan.push(("lm_head".to_string(), vec![d, cfg.vocab_size], Init::Uniform));
    plan
}

impl Model {
    /// Generates weights from `config.seed` (see the module docs).
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.d_model as f32).sqrt();
        let tensors = tensor_plan(&config)
            .into_iter()
            .enumerate()
            .map(|(t, (_, shape, init))| {
                let n: usize = shape.iter().product();
                match init {
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                    Init::Uniform => {
                        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                        rng.set_stream(t as u64);
                        (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                    }
                }
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub(crate) fn from_tensors(config: ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let plan = tensor_plan(&config);
        if tensors.len() != plan.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                plan.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in plan.iter().zip(&tensors) {
            let n: usize = shape.iter().product();
            if t.len() != n {
                return Err(Error::Shape(format!("{name}: expected {n} values, got {}", t.len())));
            }
            if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: i, value: t[i] });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor count checked above");
        let token_embedding = next();
        let position_embedding = next();
        let projector = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_up: next(),
                b_up: next(),
                w_down: next(),
                b_down: next(),
            })
            .collect();
        let final_norm = next();
        let lm_head = next();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            projector,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Tensor names and shapes in blob order.
    pub fn tensor_names(&self) -> Vec<TensorInfo> {
        tensor_plan(&self.config)
            .into_iter()
            .map(|(name, shape, _)| TensorInfo { name, shape })
            .collect()
    }

    pub(crate) fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.token_embedding, &self.position_embedding, &self.projector];
        for l in &self.layers {
            out.extend([
                &l.attn_norm[..],
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.mlp_norm,
                &l.w_up,
                &l.b_up,
                &l.w_down,
                &l.b_down,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    /// Flat little-endian `f32` weight blob.
    pub fn weight_blob(&self) -> Vec<u8> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Hex SHA-256 of [`Model::weight_blob`].
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.weight_blob()))
    }

    pub(crate) fn embed_token(&self, id: crate::TokenId) -> Result<&[f32]> {
        let d = self.config.d_model;
        let i = id as usize;
        if i >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(&self.token_embedding[i * d..(i + 1) * d])
    }
}
