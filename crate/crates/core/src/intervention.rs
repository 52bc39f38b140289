//! Layer gating and the image-attention amplification hook.
//!
//! Every head of an active layer gets the same step `alpha`; heads differ
//! only through the magnitude of their own scores, so weakly attending
//! heads receive a smaller push.

use serde::{Deserialize, Serialize};

use crate::attention::{amplify_logits, TokenSpan};
use crate::error::{Error, Result};
use crate::model::{AttentionHook, PromptLayout};

/// Amplification step for long visual spans (linear projectors).
pub const ALPHA_LONG_SPAN: f32 = 0.5;
/// Amplification step for short visual spans (resamplers).
pub const ALPHA_SHORT_SPAN: f32 = 0.2;
/// Image spans shorter than this count as short.
pub const SHORT_SPAN_TOKENS: usize = 64;
pub const DEFAULT_GAMMA: f32 = 1.1;

/// Which layers receive amplification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerGate {
    AllLayers,
    FromLayer { start_layer: usize },
    /// Layer `l ≥ 1` is active when the cosine similarity of the last-token
    /// hidden states after layers `l-1` and `l` reaches the threshold.
    Similarity { threshold: f32 },
}

/// Positions to amplify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanSelector {
    #[default]
    Image,
    Explicit(TokenSpan),
}

impl SpanSelector {
    pub fn resolve(&self, layout: &PromptLayout) -> TokenSpan {
        match self {
            SpanSelector::Image => layout.image,
            SpanSelector::Explicit(s) => *s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub alpha: f32,
    pub gamma: f32,
    pub gate: LayerGate,
    #[serde(default)]
    pub target: SpanSelector,
}

impl InterventionConfig {
    /// Defaults for a model of `n_layers` whose image span has
    /// `image_tokens` tokens: gate from the middle layer, step chosen by
    /// span length, `gamma = 1.1`.
    pub fn defaults(n_layers: usize, image_tokens: usize) -> Self {
        let alpha = if image_tokens < SHORT_SPAN_TOKENS {
            ALPHA_SHORT_SPAN
        } else {
            ALPHA_LONG_SPAN
        };
        Self {
            alpha,
            gamma: DEFAULT_GAMMA,
            gate: LayerGate::FromLayer {
                start_layer: n_layers / 2,
            },
            target: SpanSelector::Image,
        }
    }

    /// Configuration whose hook and refinement are both identities.
    pub fn identity() -> Self {
        Self {
            alpha: 0.0,
            gamma: 1.0,
            gate: LayerGate::AllLayers,
            target: SpanSelector::Image,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", format!("must be finite and >= 1, got {}", self.gamma)));
        }
        match self.gate {
            LayerGate::FromLayer { start_layer } if start_layer >= n_layers => Err(Error::config(
                "gate.start_layer",
                format!("{start_layer} is not below n_layers {n_layers}"),
            )),
            LayerGate::Similarity { threshold } if !(0.0..=1.0).contains(&threshold) => Err(
                Error::config("gate.threshold", format!("{threshold} is outside [0, 1]")),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReason {
    BelowStartLayer,
    SimilarityBelowThreshold,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub layer: usize,
    pub active: bool,
    pub reason: GateReason,
}

impl GateDecision {
    fn new(layer: usize, reason: GateReason) -> Self {
        Self {
            layer,
            active: reason == GateReason::Active,
            reason,
        }
    }
}

/// Decides per layer whether amplification applies.
///
/// `similarities[l]` compares layers `l` and `l + 1` and is required only
/// for the similarity gate. Layer 0 has no predecessor and is never active
/// under that gate.
pub fn gate_layers(
    cfg: &InterventionConfig,
    similarities: Option<&[f32]>,
    n_layers: usize,
) -> Result<Vec<GateDecision>> {
    let decisions = match cfg.gate {
        LayerGate::AllLayers => (0..n_layers)
            .map(|l| GateDecision::new(l, GateReason::Active))
            .collect(),
        LayerGate::FromLayer { start_layer } => (0..n_layers)
            .map(|l| {
                let reason = if l >= start_layer {
                    GateReason::Active
                } else {
                    GateReason::BelowStartLayer
                };
                GateDecision::new(l, reason)
            })
            .collect(),
        LayerGate::Similarity { threshold } => {
            let sims = similarities.ok_or_else(|| {
                Error::InvalidArgument("similarity gate needs layer similarities".to_string())
            })?;
            if sims.len() + 1 != n_layers {
                return Err(Error::InvalidArgument(format!(
                    "{} similarities for {n_layers} layers",
                    sims.len()
                )));
            }
            (0..n_layers)
                .map(|l| {
                    let reason = match l {
                        0 => GateReason::BelowStartLayer,
                        _ if sims[l - 1] >= threshold => GateReason::Active,
                        _ => GateReason::SimilarityBelowThreshold,
                    };
                    GateDecision::new(l, reason)
                })
                .collect()
        }
    };
    Ok(decisions)
}

/// Amplifies the target span of the last query row in active layers.
#[derive(Debug, Clone)]
pub struct ImageAttentionHook {
    alpha: f32,
    span: TokenSpan,
    active: Vec<bool>,
}

impl ImageAttentionHook {
    pub fn span(&self) -> TokenSpan {
        self.span
    }

    pub fn is_active(&self, layer: usize) -> bool {
        self.active.get(layer).copied().unwrap_or(false)
    }
}

impl AttentionHook for ImageAttentionHook {
    fn edit_last_row(&self, layer: usize, _head: usize, _layout: &PromptLayout, logits: &mut [f32]) {
        if self.alpha == 0.0 || self.span.is_empty() || !self.is_active(layer) {
            return;
        }
        // The span was bounds-checked against the layout when the hook was made.
        if let Err(e) = amplify_logits(logits, self.span, self.alpha) {
            log::error!("skipping amplification in layer {layer}: {e}");
        }
    }
}

pub fn make_hook(cfg: &InterventionConfig, layout: &PromptLayout, gates: &[GateDecision]) -> ImageAttentionHook {
    let mut span = cfg.target.resolve(layout);
    if span.check_within(layout.len()).is_err() {
        log::warn!(
            "target span {}..{} outside a {}-token prompt; hook disabled",
            span.start,
            span.end,
            layout.len()
        );
        span = TokenSpan::with_len(0, 0);
    }
    let mut active = vec![false; gates.iter().map(|g| g.layer + 1).max().unwrap_or(0)];
    for g in gates {
        active[g.layer] = g.active;
    }
    ImageAttentionHook {
        alpha: cfg.alpha,
        span,
        active,
    }
}
