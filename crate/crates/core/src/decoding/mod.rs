//! Generation loops over a conditioned stream and an image-free stream.
//!
//! Each step scores the next token with the image-conditioned prompt and,
//! when contrastive refinement is on, with the same instruction and history
//! but no image. The two are combined in logit space as
//! `γ·cond − (γ−1)·text` before any strategy ranks or samples tokens.

mod engine;
mod search;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::CategoryMass;
use crate::TokenId;

pub use engine::{generate_with, DualStream, Engine};
pub use search::{
    beam, generate, greedy, log_softmax, nucleus, nucleus_distribution, sample_nucleus, teacher_force,
    BeamResult, Generation, Hypothesis,
};

/// Finite scores over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct LogitVector(Vec<f32>);

impl LogitVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: values[index],
            });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest score; the lowest id wins ties.
    pub fn argmax(&self) -> Option<TokenId> {
        let mut best: Option<(usize, f32)> = None;
        for (i, &v) in self.0.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i as TokenId)
    }
}

impl TryFrom<Vec<f32>> for LogitVector {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        LogitVector::new(v)
    }
}

impl From<LogitVector> for Vec<f32> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

/// Contrastive refinement: `γ·cond − (γ−1)·text`, elementwise.
///
/// `gamma == 1` returns `cond` unchanged. Each element is evaluated in
/// `f64` and rounded once.
pub fn refine(cond: &LogitVector, text: &LogitVector, gamma: f32) -> Result<LogitVector> {
    if cond.len() != text.len() {
        return Err(Error::Shape(format!(
            "conditioned logits have {} entries, text-only logits {}",
            cond.len(),
            text.len()
        )));
    }
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 1, got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(cond.clone());
    }
    let g = f64::from(gamma);
    let values = cond
        .values()
        .iter()
        .zip(text.values())
        .map(|(&c, &t)| (g * f64::from(c) - (g - 1.0) * f64::from(t)) as f32)
        .collect();
    LogitVector::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
    Nucleus { top_p: f32, temperature: f32, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub eos_id: TokenId,
    pub contrastive: bool,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_new_tokens,
            eos_id: crate::model::EOS_ID,
            contrastive: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens", "must be at least 1"));
        }
        match self.strategy {
            Strategy::Greedy => Ok(()),
            Strategy::Beam { width: 0 } => Err(Error::config("beams", "must be at least 1")),
            Strategy::Beam { .. } => Ok(()),
            Strategy::Nucleus { top_p, .. } if !(top_p > 0.0 && top_p <= 1.0) => {
                Err(Error::config("top_p", format!("{top_p} is outside (0, 1]")))
            }
            Strategy::Nucleus { temperature, .. } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::config("temperature", format!("{temperature} must be > 0")))
            }
            Strategy::Nucleus { .. } => Ok(()),
        }
    }
}

/// Per-step record of what both streams produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub token: TokenId,
    pub cond_logits: LogitVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_logits: Option<LogitVector>,
    /// Head-averaged image mass per layer of the conditioned stream.
    pub image_mass: Vec<f64>,
    /// `[layer][head]` category masses of the conditioned stream.
    pub masses: Vec<Vec<CategoryMass>>,
}

/// What a [`LogitSource`] returns for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Scores used for ranking or sampling (refined when contrastive).
    pub scores: LogitVector,
    pub cond: LogitVector,
    pub text: Option<LogitVector>,
    pub masses: Vec<Vec<CategoryMass>>,
}

impl StepOutput {
    pub fn into_trace(self, step: usize, token: TokenId) -> StepTrace {
        let image_mass = self
            .masses
            .iter()
            .map(|heads| {
                if heads.is_empty() {
                    0.0
                } else {
                    heads.iter().map(|m| m.image).sum::<f64>() / heads.len() as f64
                }
            })
            .collect();
        StepTrace {
            step,
            token,
            cond_logits: self.cond,
            text_logits: self.text,
            image_mass,
            masses: self.masses,
        }
    }
}

/// Next-token scorer given the committed history.
pub trait LogitSource {
    fn vocab_size(&self) -> usize;

    /// Scores the next token, or `None` when the history no longer fits the
    /// context window.
    fn step(&self, history: &[TokenId]) -> Result<Option<StepOutput>>;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f32]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn refine_identity_and_substitution() {
        let c = lv(&[2.0, 0.0]);
        let t = lv(&[0.0, 2.0]);
        assert_eq!(refine(&c, &t, 1.0).unwrap(), c);
        let r = refine(&c, &t, 1.1).unwrap();
        assert!((r.values()[0] - 2.2).abs() < 1e-6);
        assert!((r.values()[1] + 0.2).abs() < 1e-6);
    }

    #[test]
    fn refine_rejects_mismatch_and_small_gamma() {
        assert!(matches!(refine(&lv(&[1.0]), &lv(&[1.0, 2.0]), 1.1), Err(Error::Shape(_))));
        assert!(refine(&lv(&[1.0]), &lv(&[1.0]), 0.9).is_err());
    }

    #[test]
    fn refine_gamma_one_keeps_negative_zero() {
        let c = lv(&[-0.0]);
        let t = lv(&[-3.0]);
        assert_eq!(refine(&c, &t, 1.0).unwrap().values()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(lv(&[1.0, 3.0, 3.0]).argmax(), Some(1));
        assert!(LogitVector::new(vec![f32::NAN]).is_err());
    }

    #[test]
    fn decode_config_validation() {
        let mut c = DecodeConfig::greedy(0);
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "max_new_tokens"));
        c.max_new_tokens = 4;
        c.strategy = Strategy::Nucleus {
            top_p: 0.0,
            temperature: 1.0,
            seed: 0,
        };
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "top_p"));
        c.strategy = Strategy::Beam { width: 0 };
        assert!(c.validate().is_err());
    }
}
