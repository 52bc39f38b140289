//! Subcommand implementations and the record formats they read and write.

pub mod chair;
pub mod generate;
pub mod inertia;
pub mod init;
pub mod pope;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use steer_core::model::{project_image, ImageDescriptor, Model};
use steer_core::vocab::Vocabulary;
use steer_core::{jsonl, TokenId};

use crate::config::Settings;
use crate::error::{CliError, Result};

/// One line of a prompts file. `image_at` counts instruction words placed
/// before the image.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: String,
    #[serde(default)]
    pub image_id: Option<String>,
    pub instruction: String,
    #[serde(default)]
    pub image_at: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub features: Vec<Vec<f32>>,
}

/// One line of `tokens.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokensRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub finished: bool,
    pub truncated: bool,
}

pub fn load_model(s: &Settings) -> Result<Model> {
    let path = s.path("model", None)?;
    Ok(Model::load(&path)?)
}

pub fn load_vocab(s: &Settings, model: &Model) -> Result<Vocabulary> {
    let path = s.path("vocab", None)?;
    let vocab: Vocabulary = jsonl::read_json(&path)?;
    if vocab.len() != model.config().vocab_size {
        return Err(CliError::config(
            "vocab",
            format!(
                "{} has {} entries, the model vocabulary has {}",
                path.display(),
                vocab.len(),
                model.config().vocab_size
            ),
        ));
    }
    Ok(vocab)
}

/// Reads image features and projects each image to visual embeddings.
/// `image_tokens` defaults to one token per feature row.
pub fn load_images(s: &Settings, model: &Model) -> Result<BTreeMap<String, Vec<Vec<f32>>>> {
    let path = s.path("images", None)?;
    let records: Vec<ImageRecord> = jsonl::read(&path)?;
    let mut out = BTreeMap::new();
    for r in records {
        let bad = |reason: String| CliError::File {
            path: path.clone(),
            reason: format!("image {}: {reason}", r.image_id),
        };
        let n_v = s.file.image_tokens.unwrap_or(r.features.len());
        let desc = ImageDescriptor::new(r.features.clone()).map_err(|e| bad(e.to_string()))?;
        let rows = project_image(&desc, n_v, model).map_err(|e| bad(e.to_string()))?;
        if out.insert(r.image_id.clone(), rows).is_some() {
            return Err(bad("duplicate image id".to_string()));
        }
    }
    Ok(out)
}

pub fn load_prompts(s: &Settings) -> Result<Vec<PromptRecord>> {
    let path = s.path("prompts", None)?;
    let prompts: Vec<PromptRecord> = jsonl::read(&path)?;
    let mut seen = std::collections::BTreeSet::new();
    for p in &prompts {
        if !seen.insert(p.id.as_str()) {
            return Err(CliError::File {
                path,
                reason: format!("duplicate prompt id `{}`", p.id),
            });
        }
    }
    Ok(prompts)
}

/// Encodes a prompt's instruction and checks where the image goes.
pub fn encode_instruction(vocab: &Vocabulary, p: &PromptRecord, path: &Path) -> Result<Vec<TokenId>> {
    let tokens = vocab.encode(&p.instruction).map_err(|e| CliError::File {
        path: path.to_path_buf(),
        reason: format!("prompt {}: {e}", p.id),
    })?;
    if p.image_at > tokens.len() {
        return Err(CliError::File {
            path: path.to_path_buf(),
            reason: format!(
                "prompt {}: image_at {} is past the {}-word instruction",
                p.id,
                p.image_at,
                tokens.len()
            ),
        });
    }
    Ok(tokens)
}
