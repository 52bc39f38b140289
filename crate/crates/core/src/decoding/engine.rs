use serde::{Deserialize, Serialize};

use super::{generate, refine, DecodeConfig, Generation, LogitSource, StepOutput};
use crate::error::Result;
use crate::intervention::{gate_layers, make_hook, InterventionConfig, LayerGate};
use crate::model::{layer_similarity, AttentionHook, ForwardTrace, LanguageModel, Prompt};
use crate::report::CategoryMass;
use crate::TokenId;

/// The two prompts of one generation. Both carry the same instruction and
/// the same committed history; only `conditioned` has image tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualStream {
    pub conditioned: Prompt,
    pub text_only: Prompt,
}

impl DualStream {
    pub fn new(prompt: Prompt) -> Self {
        let text_only = prompt.without_image();
        Self {
            conditioned: prompt,
            text_only,
        }
    }

    /// Appends `token` to both histories.
    pub fn advance(&self, token: TokenId) -> Self {
        let mut next = self.clone();
        next.conditioned.history.push(token);
        next.text_only.history.push(token);
        next
    }

    pub fn with_history(&self, history: &[TokenId]) -> Self {
        let mut next = self.clone();
        next.conditioned.history.extend_from_slice(history);
        next.text_only.history.extend_from_slice(history);
        next
    }
}

/// A model plus prompt plus intervention settings, exposed as a
/// [`LogitSource`].
///
/// Without an intervention config the engine is plain decoding. With one,
/// the conditioned stream runs under the amplification hook and, if
/// `contrastive` is set, is refined against the unhooked text-only stream.
pub struct Engine<'a, M: LanguageModel + ?Sized> {
    model: &'a M,
    stream: DualStream,
    intervention: Option<InterventionConfig>,
    contrastive: bool,
}

impl<'a, M: LanguageModel + ?Sized> Engine<'a, M> {
    /// Intervention-free engine.
    pub fn vanilla(model: &'a M, prompt: Prompt) -> Self {
        Self {
            model,
            stream: DualStream::new(prompt),
            intervention: None,
            contrastive: false,
        }
    }

    pub fn new(model: &'a M, prompt: Prompt, intervention: InterventionConfig, contrastive: bool) -> Result<Self> {
        intervention.validate(model.n_layers())?;
        Ok(Self {
            model,
            stream: DualStream::new(prompt),
            intervention: Some(intervention),
            contrastive,
        })
    }

    pub fn stream(&self) -> &DualStream {
        &self.stream
    }

    fn run_conditioned(&self, prompt: &Prompt) -> Result<ForwardTrace> {
        let Some(cfg) = self.intervention else {
            return self.model.run(prompt, None);
        };
        let n_layers = self.model.n_layers();
        let similarities = match cfg.gate {
            LayerGate::Similarity { .. } => {
                let probe = self.model.run(prompt, None)?;
                Some(layer_similarity(&probe)?.values)
            }
            _ => None,
        };
        let gates = gate_layers(&cfg, similarities.as_deref(), n_layers)?;
        let hook = make_hook(&cfg, &prompt.layout(), &gates);
        self.model.run(prompt, Some(&hook as &dyn AttentionHook))
    }
}

impl<M: LanguageModel + ?Sized> LogitSource for Engine<'_, M> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn step(&self, history: &[TokenId]) -> Result<Option<StepOutput>> {
        if self.stream.conditioned.len() + history.len() > self.model.max_seq() {
            return Ok(None);
        }
        let streams = self.stream.with_history(history);
        let gamma = self.intervention.filter(|_| self.contrastive).map(|c| c.gamma);
        let (cond, text) = rayon::join(
            || self.run_conditioned(&streams.conditioned),
            || gamma.map(|_| self.model.run(&streams.text_only, None)),
        );
        let cond = cond?;
        let text = text.transpose()?;
        let scores = match (&text, gamma) {
            (Some(t), Some(g)) => refine(&cond.logits, &t.logits, g)?,
            _ => cond.logits.clone(),
        };
        let masses = cond
            .attention
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|row| CategoryMass::from_row(row, &cond.layout))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(StepOutput {
            scores,
            cond: cond.logits,
            text: text.map(|t| t.logits),
            masses,
        }))
    }
}

/// Builds an engine for `prompt` and runs the configured strategy.
/// `intervention = None` is plain decoding.
pub fn generate_with<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: Prompt,
    cfg: &DecodeConfig,
    intervention: Option<InterventionConfig>,
) -> Result<Generation> {
    let engine = match intervention {
        Some(i) => Engine::new(model, prompt, i, cfg.contrastive)?,
        None => Engine::vanilla(model, prompt),
    };
    generate(&engine, cfg)
}
