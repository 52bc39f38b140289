//! Text-inertia probe.
//!
//! A hallucinated object is located in a generated caption, the caption is
//! cut just before its first mention, and the model continues from that
//! history with no image. If the short continuation names the same object
//! again, the hallucination is attributed to text inertia.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::chair::{extract_objects, Lexicon};
use crate::decoding::{generate, DecodeConfig, Engine};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, Prompt};
use crate::vocab::{Decoded, Vocabulary};
use crate::TokenId;

pub const DEFAULT_REGEN_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InertiaCase {
    pub image_id: String,
    /// Canonical object name.
    pub object: String,
    /// Index of the token that starts the first mention; the regeneration
    /// history is `tokens[..truncation_offset]`.
    pub truncation_offset: usize,
    pub regen_window: usize,
}

/// Checks that `decoded.spans` is a valid, ordered map of `tokens` into
/// `decoded.text`.
fn check_offsets(tokens: &[TokenId], decoded: &Decoded) -> Result<()> {
    if decoded.spans.len() != tokens.len() {
        return Err(Error::Shape(format!(
            "{} token spans for {} tokens",
            decoded.spans.len(),
            tokens.len()
        )));
    }
    let n_chars = decoded.text.chars().count();
    let mut prev_end = 0;
    for (i, span) in decoded.spans.iter().enumerate() {
        if span.start < prev_end || span.end > n_chars || span.start > span.end {
            return Err(Error::InvalidArgument(format!(
                "token {i} span {}..{} is inconsistent with a {n_chars}-char text",
                span.start, span.end
            )));
        }
        prev_end = span.end;
    }
    Ok(())
}

/// One case per unique hallucinated object, truncated at the token whose
/// span covers the start of the object's first mention.
pub fn locate_hallucinations(
    image_id: &str,
    tokens: &[TokenId],
    decoded: &Decoded,
    truth: &BTreeSet<String>,
    lex: &Lexicon,
    regen_window: usize,
) -> Result<Vec<InertiaCase>> {
    if regen_window == 0 {
        return Err(Error::config("regen_window", "must be at least 1"));
    }
    check_offsets(tokens, decoded)?;
    let mut seen = BTreeSet::new();
    let mut cases = Vec::new();
    for mention in extract_objects(&decoded.text, lex) {
        if truth.contains(&mention.object) || !seen.insert(mention.object.clone()) {
            continue;
        }
        let token = decoded
            .spans
            .iter()
            .position(|s| !s.is_empty() && s.contains(mention.offset))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no token covers character {} of `{}`",
                    mention.offset, mention.object
                ))
            })?;
        cases.push(InertiaCase {
            image_id: image_id.to_string(),
            object: mention.object,
            truncation_offset: token,
            regen_window,
        });
    }
    Ok(cases)
}

/// Decides whether a regenerated window mentions an object.
pub trait InertiaJudge: Sync {
    fn mentions(&self, window: &str, object: &str) -> Result<bool>;
}

/// Judge backed by the CHAIR lexicon, so synonyms count as the object.
#[derive(Debug, Clone)]
pub struct LexiconJudge<'a> {
    pub lexicon: &'a Lexicon,
}

impl InertiaJudge for LexiconJudge<'_> {
    fn mentions(&self, window: &str, object: &str) -> Result<bool> {
        Ok(extract_objects(window, self.lexicon).iter().any(|m| m.object == object))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Inertia,
    NoInertia,
    /// The truncated prompt did not fit the context window.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub case: InertiaCase,
    pub outcome: Outcome,
    pub window_tokens: Vec<TokenId>,
    pub window_text: String,
}

/// The image-free regeneration prompt for a case.
pub fn regen_prompt(instruction: &[TokenId], history: &[TokenId], case: &InertiaCase) -> Result<Prompt> {
    if case.truncation_offset > history.len() {
        return Err(Error::InvalidArgument(format!(
            "truncation offset {} is past the {}-token generation",
            case.truncation_offset,
            history.len()
        )));
    }
    let mut prompt = Prompt::text(instruction.to_vec());
    prompt.history = history[..case.truncation_offset].to_vec();
    Ok(prompt)
}

/// Regenerates up to `case.regen_window` tokens without the image and asks
/// `judge` whether the window names the case's object. Decoding is plain:
/// no intervention and no contrastive refinement.
#[allow(clippy::too_many_arguments)]
pub fn probe_case<M: LanguageModel + ?Sized, J: InertiaJudge + ?Sized>(
    model: &M,
    instruction: &[TokenId],
    history: &[TokenId],
    case: &InertiaCase,
    decode: &DecodeConfig,
    vocab: &Vocabulary,
    judge: &J,
) -> Result<ProbeRecord> {
    let prompt = regen_prompt(instruction, history, case)?;
    debug_assert!(prompt.layout().image.is_empty());
    let skipped = |case: &InertiaCase| ProbeRecord {
        case: case.clone(),
        outcome: Outcome::Skipped,
        window_tokens: Vec::new(),
        window_text: String::new(),
    };
    if prompt.len() > model.max_seq() {
        log::warn!(
            "inertia: skipping {} / {}: prompt of {} tokens exceeds context {}",
            case.image_id,
            case.object,
            prompt.len(),
            model.max_seq()
        );
        return Ok(skipped(case));
    }
    let cfg = DecodeConfig {
        max_new_tokens: case.regen_window.min(decode.max_new_tokens.max(1)),
        contrastive: false,
        ..*decode
    };
    let generation = generate(&Engine::vanilla(model, prompt), &cfg)?;
    if generation.tokens.is_empty() && generation.truncated {
        return Ok(skipped(case));
    }
    let mut window = generation.tokens;
    window.truncate(case.regen_window);
    let text = vocab.decode(&window)?.text;
    let outcome = if judge.mentions(&text, &case.object)? {
        Outcome::Inertia
    } else {
        Outcome::NoInertia
    };
    Ok(ProbeRecord {
        case: case.clone(),
        outcome,
        window_tokens: window,
        window_text: text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InertiaReport {
    pub schema_version: String,
    /// Probed cases, excluding skipped ones.
    pub total_hallucinations: usize,
    pub inertia_hits: usize,
    pub rate: f64,
    pub skipped: usize,
    pub empty: bool,
}

pub fn inertia_rate(records: &[ProbeRecord]) -> InertiaReport {
    let count = |o: Outcome| records.iter().filter(|r| r.outcome == o).count();
    let hits = count(Outcome::Inertia);
    let total = hits + count(Outcome::NoInertia);
    InertiaReport {
        schema_version: crate::SCHEMA_VERSION.to_string(),
        total_hallucinations: total,
        inertia_hits: hits,
        rate: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        skipped: count(Outcome::Skipped),
        empty: total == 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn lex() -> Lexicon {
        let canonical: Vec<String> = ["dog", "car", "frisbee"].iter().map(|s| s.to_string()).collect();
        let synonyms = BTreeMap::from([("automobile".to_string(), "car".to_string())]);
        Lexicon::new(canonical, synonyms).unwrap()
    }

    fn vocab() -> Vocabulary {
        let words = ["<bos>", "<eos>", "a", "dog", "near", "car", "automobile", "and", "frisbee", "the"];
        Vocabulary::new(words.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn case(object: &str, offset: usize) -> InertiaCase {
        InertiaCase {
            image_id: "1".into(),
            object: object.into(),
            truncation_offset: offset,
            regen_window: 10,
        }
    }

    #[test]
    fn locates_first_mention_of_each_object() {
        let v = vocab();
        let tokens = v.encode("a dog near a car and a car and a frisbee").unwrap();
        let decoded = v.decode(&tokens).unwrap();
        let truth = BTreeSet::from(["dog".to_string()]);
        let cases = locate_hallucinations("1", &tokens, &decoded, &truth, &lex(), 10).unwrap();
        assert_eq!(cases, vec![case("car", 4), case("frisbee", 10)]);
    }

    #[test]
    fn no_hallucination_no_cases() {
        let v = vocab();
        let tokens = v.encode("a dog").unwrap();
        let decoded = v.decode(&tokens).unwrap();
        let truth = BTreeSet::from(["dog".to_string()]);
        assert!(locate_hallucinations("1", &tokens, &decoded, &truth, &lex(), 10)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn inconsistent_offsets_error() {
        let v = vocab();
        let tokens = v.encode("a dog").unwrap();
        let mut decoded = v.decode(&tokens).unwrap();
        decoded.spans.pop();
        assert!(locate_hallucinations("1", &tokens, &decoded, &BTreeSet::new(), &lex(), 10).is_err());
        let mut decoded = v.decode(&tokens).unwrap();
        decoded.spans[1].end = 99;
        assert!(locate_hallucinations("1", &tokens, &decoded, &BTreeSet::new(), &lex(), 10).is_err());
    }

    #[test]
    fn judge_honours_synonyms() {
        let l = lex();
        let judge = LexiconJudge { lexicon: &l };
        assert!(judge.mentions("the automobile", "car").unwrap());
        assert!(!judge.mentions("the dog", "car").unwrap());
    }

    #[test]
    fn rate_counts() {
        let rec = |outcome| ProbeRecord {
            case: case("car", 0),
            outcome,
            window_tokens: vec![],
            window_text: String::new(),
        };
        let r = inertia_rate(&[]);
        assert!(r.empty);
        assert_eq!(r.rate, 0.0);
        let r = inertia_rate(&[
            rec(Outcome::Inertia),
            rec(Outcome::NoInertia),
            rec(Outcome::NoInertia),
            rec(Outcome::NoInertia),
            rec(Outcome::Skipped),
        ]);
        assert_eq!((r.total_hallucinations, r.inertia_hits, r.skipped), (4, 1, 1));
        assert_eq!(r.rate, 0.25);
    }

    #[test]
    fn regen_prompt_has_no_image() {
        let p = regen_prompt(&[2, 3], &[4, 5, 6], &case("car", 2)).unwrap();
        assert_eq!(p.history, vec![4, 5]);
        assert!(p.layout().image.is_empty());
        assert!(regen_prompt(&[2], &[4], &case("car", 2)).is_err());
    }
}
