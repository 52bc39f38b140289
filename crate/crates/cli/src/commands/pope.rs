use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use steer_core::chair::TruthRecord;
use steer_core::decoding::generate_with;
use steer_core::model::{LanguageModel, Model, Prompt};
use steer_core::pope::{
    build_splits, parse_answer, run_items, score, Answer, Answerer, ChatPrompt, DialogueMode, ObjectStats, PopeItem,
    SkippedImage, Split, SplitParams,
};
use steer_core::vocab::Vocabulary;
use steer_core::{jsonl, SCHEMA_VERSION};

use super::{load_images, load_model, load_vocab};
use crate::config::{parse_mode, parse_split, DecodeSettings, InterventionSettings, Settings};
use crate::config::{DEFAULT_POPE_ANSWER_TOKENS, DEFAULT_POPE_QUESTIONS};
use crate::error::{CliError, Result};
use crate::output::{write_json, write_jsonl};

pub struct BuildInputs {
    pub annotations: Option<PathBuf>,
    pub split: Option<String>,
    pub n_images: Option<usize>,
    pub questions: Option<usize>,
}

#[derive(Debug, Serialize)]
struct BuildSummary {
    schema_version: &'static str,
    split: Split,
    seed: u64,
    n_images: usize,
    n_items: usize,
    skipped: Vec<SkippedImage>,
}

pub fn build(s: &Settings, inputs: &BuildInputs) -> Result<()> {
    let path = s.path("annotations", inputs.annotations.as_ref())?;
    let records: Vec<TruthRecord> = jsonl::read(&path)?;
    let mut annotations: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        annotations.entry(r.image_id).or_default().extend(r.objects);
    }
    let split = match inputs.split.as_deref().or(s.file.pope.split.as_deref()) {
        Some(v) => parse_split("pope.split", v)?,
        None => Split::Random,
    };
    let q = inputs
        .questions
        .or(s.file.pope.questions_per_image)
        .unwrap_or(DEFAULT_POPE_QUESTIONS);
    if q == 0 || !q.is_multiple_of(2) {
        return Err(CliError::config(
            "pope.questions_per_image",
            format!("must be a positive even number, got {q}"),
        ));
    }
    let params = SplitParams {
        split,
        n_images: inputs.n_images.or(s.file.pope.n_images).unwrap_or(usize::MAX),
        q_per_image: q,
        seed: s.seed,
    };
    let stats = ObjectStats::from_annotations(&annotations);
    let built = build_splits(&annotations, &stats, &params)?;
    let n_images = built.items.iter().map(|i| &i.image_id).collect::<BTreeSet<_>>().len();
    write_jsonl(&s.out.join("pope_items.jsonl"), &built.items)?;
    write_json(
        &s.out.join("pope_build.json"),
        &BuildSummary {
            schema_version: SCHEMA_VERSION,
            split,
            seed: s.seed,
            n_images,
            n_items: built.items.len(),
            skipped: built.skipped,
        },
    )
}

pub struct EvalInputs {
    pub items: Option<PathBuf>,
    pub answers: Option<PathBuf>,
    pub mode: Option<String>,
}

/// One line of an answers file, matched to items by image and turn.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRecord {
    pub image_id: String,
    pub turn_index: usize,
    pub answer: String,
}

#[derive(Debug, Serialize)]
struct AnsweredItem {
    #[serde(flatten)]
    item: PopeItem,
    answer: String,
    parsed: Answer,
}

/// Answers POPE questions with the model: the question (after any earlier
/// turns) is the instruction and the image precedes it.
struct ModelAnswerer<'a> {
    model: &'a Model,
    vocab: &'a Vocabulary,
    images: &'a BTreeMap<String, Vec<Vec<f32>>>,
    decode: DecodeSettings,
    intervention: InterventionSettings,
    seed: u64,
}

impl Answerer for ModelAnswerer<'_> {
    fn answer(&self, prompt: &ChatPrompt) -> steer_core::Result<String> {
        let text = if prompt.history.is_empty() {
            prompt.question.clone()
        } else {
            format!("{} {}", prompt.history_text(), prompt.question)
        };
        let image = self
            .images
            .get(&prompt.image_id)
            .ok_or_else(|| steer_core::Error::UnknownImages(vec![prompt.image_id.clone()]))?;
        let icfg = self.intervention.resolve(self.model.n_layers(), image.len());
        let label = format!("pope/answer/{}/{}", prompt.image_id, prompt.history.len());
        let dcfg = self.decode.config(self.seed, &label, icfg.is_some());
        let p = Prompt::new(self.vocab.encode(&text)?, 0, image.clone());
        let g = generate_with(self.model, p, &dcfg, icfg)?;
        Ok(self.vocab.decode(&g.tokens)?.text)
    }
}

pub fn eval(s: &Settings, inputs: &EvalInputs) -> Result<()> {
    let items_path = s.path("items", inputs.items.as_ref())?;
    let items: Vec<PopeItem> = jsonl::read(&items_path)?;
    let mode = match inputs.mode.as_deref().or(s.file.pope.mode.as_deref()) {
        Some(v) => parse_mode("pope.mode", v)?,
        None => DialogueMode::SingleTurn,
    };
    let answered = if inputs.answers.is_some() || s.has_path("answers") {
        let path = s.path("answers", inputs.answers.as_ref())?;
        let records: Vec<AnswerRecord> = jsonl::read(&path)?;
        let by_key: BTreeMap<(String, usize), String> = records
            .into_iter()
            .map(|r| ((r.image_id, r.turn_index), r.answer))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for item in &items {
            let a = by_key
                .get(&(item.image_id.clone(), item.turn_index))
                .ok_or_else(|| CliError::File {
                    path: path.clone(),
                    reason: format!("no answer for image {} turn {}", item.image_id, item.turn_index),
                })?;
            out.push((item.clone(), a.clone()));
        }
        out
    } else {
        let model = load_model(s)?;
        let vocab = load_vocab(s, &model)?;
        s.intervention.validate(model.n_layers())?;
        let images = load_images(s, &model)?;
        let mut decode = s.decode;
        decode.max_new_tokens = s.file.pope.max_answer_tokens.unwrap_or(DEFAULT_POPE_ANSWER_TOKENS);
        decode.validate()?;
        let answerer = ModelAnswerer {
            model: &model,
            vocab: &vocab,
            images: &images,
            decode,
            intervention: s.intervention,
            seed: s.seed,
        };
        run_items(&items, mode, &answerer)?
    };
    let parsed: Vec<(PopeItem, Answer)> = answered.iter().map(|(i, a)| (i.clone(), parse_answer(a))).collect();
    let report = score(&parsed, mode);
    let records: Vec<AnsweredItem> = answered
        .into_iter()
        .zip(&parsed)
        .map(|((item, answer), (_, p))| AnsweredItem {
            item,
            answer,
            parsed: *p,
        })
        .collect();
    write_jsonl(&s.out.join("pope_answers.jsonl"), &records)?;
    write_json(&s.out.join("pope.json"), &report)
}
