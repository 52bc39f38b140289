#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steer_core::attention::AttentionRow;
use steer_core::chair::{truth_map, CaptionRecord, Lexicon, TruthRecord};
use steer_core::decoding::{LogitSource, LogitVector, StepOutput};
use steer_core::model::{AttentionHook, ForwardTrace, LanguageModel, Model, ModelConfig, Prompt, EOS_ID};
use steer_core::pope::{Answerer, ChatPrompt};
use steer_core::{jsonl, Result, TokenId};

pub fn fixture_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn seed7() -> Model {
    Model::build(ModelConfig::fixture()).unwrap()
}

pub fn chair_fixture() -> (Vec<CaptionRecord>, BTreeMap<String, BTreeSet<String>>, Lexicon) {
    let lex: Lexicon = jsonl::read_json(&fixture_path("chair/lexicon.json")).unwrap();
    let captions: Vec<CaptionRecord> = jsonl::read(&fixture_path("chair/captions.jsonl")).unwrap();
    let truth: Vec<TruthRecord> = jsonl::read(&fixture_path("chair/truth.jsonl")).unwrap();
    let truth = truth_map(&truth, &lex);
    (captions, truth, lex)
}

pub fn pope_annotations() -> BTreeMap<String, BTreeSet<String>> {
    let recs: Vec<TruthRecord> = jsonl::read(&fixture_path("pope/annotations.jsonl")).unwrap();
    recs.into_iter()
        .map(|r| (r.image_id, r.objects.into_iter().collect()))
        .collect()
}

/// Random prompt for the seed-7 model: 1..=6 instruction tokens, image
/// spliced at a random point, 0..=8 image rows in `[-1, 1]`.
pub fn random_prompt(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Prompt {
    let n_instr = rng.gen_range(1..=6);
    let instruction: Vec<TokenId> = (0..n_instr).map(|_| rng.gen_range(2..cfg.vocab_size as TokenId)).collect();
    let n_img = rng.gen_range(0..=8);
    let image = (0..n_img)
        .map(|_| (0..cfg.d_model).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    Prompt::new(instruction, rng.gen_range(0..=n_instr), image)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Softmax evaluated in `f64` with a two-pass max shift.
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| if *x == f64::NEG_INFINITY { 0.0 } else { (x - m).exp() }).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Hand-built model that scores a fixed continuation.
///
/// With `needs_image` unset the model ignores the image and continues
/// `script` from wherever the history leaves off, so a caption truncated
/// before an object reproduces that object. With `needs_image` set the
/// script is only followed when image rows are present; otherwise it emits
/// `filler` until the budget runs out.
pub struct ScriptModel {
    pub script: Vec<TokenId>,
    pub filler: TokenId,
    pub vocab_size: usize,
    pub needs_image: bool,
}

impl ScriptModel {
    fn next(&self, prompt: &Prompt) -> TokenId {
        if self.needs_image && prompt.image.is_empty() {
            return self.filler;
        }
        let h = &prompt.history;
        if h.len() < self.script.len() && self.script[..h.len()] == h[..] {
            self.script[h.len()]
        } else {
            EOS_ID
        }
    }
}

impl LanguageModel for ScriptModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_seq(&self) -> usize {
        256
    }

    fn n_layers(&self) -> usize {
        1
    }

    fn run(&self, prompt: &Prompt, _hook: Option<&dyn AttentionHook>) -> Result<ForwardTrace> {
        let target = self.next(prompt);
        let logits = (0..self.vocab_size)
            .map(|i| if i as TokenId == target { 8.0 } else { 0.0 })
            .collect();
        let n = prompt.len();
        let row = AttentionRow::from_logits(vec![0.0; n]).normalized()?;
        Ok(ForwardTrace {
            logits: LogitVector::new(logits)?,
            attention: vec![vec![row]],
            hidden: vec![vec![1.0]],
            layout: prompt.layout(),
        })
    }
}

/// Scripted respondent. Images 01-14 answer from the annotations, 15-17
/// always say yes, 18-19 always say no, and 20 never gives a usable
/// answer. In a dialogue, images 01-14 repeat "yes" once they have said it.
pub struct ScriptedAnswerer {
    pub truth: BTreeMap<String, BTreeSet<String>>,
}

impl Answerer for ScriptedAnswerer {
    fn answer(&self, prompt: &ChatPrompt) -> steer_core::Result<String> {
        let n: usize = prompt.image_id.trim_start_matches("img").parse().unwrap();
        let object = prompt
            .question
            .strip_prefix("Is there a ")
            .and_then(|q| q.strip_suffix(" in the image?"))
            .unwrap();
        let said_yes = prompt.history.iter().any(|t| t.answer.starts_with("Yes"));
        Ok(match n {
            1..=14 if said_yes || self.truth[&prompt.image_id].contains(object) => "Yes, there is.".into(),
            1..=14 => "No.".into(),
            15..=17 => "Yes".into(),
            18..=19 => "no, I don't see one".into(),
            _ => "It is hard to tell.".into(),
        })
    }
}

/// History-dependent pseudo-random logits over a tiny vocabulary.
pub struct Hashed {
    pub vocab: usize,
    pub salt: u64,
}

impl LogitSource for Hashed {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn step(&self, history: &[TokenId]) -> Result<Option<StepOutput>> {
        let h = history.iter().fold(self.salt, |acc, &t| acc.wrapping_mul(31).wrapping_add(t as u64 + 1));
        let v: Vec<f32> = (0..self.vocab)
            .map(|t| (((h.wrapping_mul(17).wrapping_add(t as u64 * 7)) % 1000) as f32 * 0.713).sin() * 3.0)
            .collect();
        let v = LogitVector::new(v)?;
        Ok(Some(StepOutput {
            scores: v.clone(),
            cond: v,
            text: None,
            masses: vec![],
        }))
    }
}

fn log_softmax64(v: &[f32]) -> Vec<f64> {
    let xs: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Every finished sequence shorter than `len` plus every unfinished
/// sequence of exactly `len`, ranked by mean log-probability.
pub fn exhaustive_best(src: &Hashed, len: usize) -> (Vec<TokenId>, bool, f64) {
    let mut all: Vec<(Vec<TokenId>, bool, f64)> = Vec::new();
    let mut frontier = vec![(Vec::<TokenId>::new(), 0.0f64)];
    for depth in 0..len {
        let mut next = Vec::new();
        for (toks, lp) in &frontier {
            let out = src.step(toks).unwrap().unwrap();
            for (t, l) in log_softmax64(out.scores.values()).into_iter().enumerate() {
                let t = t as TokenId;
                if t == EOS_ID {
                    all.push((toks.clone(), true, (lp + l) / (toks.len() + 1) as f64));
                } else {
                    let mut s = toks.clone();
                    s.push(t);
                    if depth + 1 == len {
                        all.push((s.clone(), false, (lp + l) / len as f64));
                    }
                    next.push((s, lp + l));
                }
            }
        }
        frontier = next;
    }
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    all.swap_remove(0)
}
