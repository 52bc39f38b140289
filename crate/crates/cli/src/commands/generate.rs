use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use steer_core::chair::CaptionRecord;
use steer_core::decoding::{generate_with, DecodeConfig, StepTrace};
use steer_core::intervention::InterventionConfig;
use steer_core::model::{LanguageModel, Prompt};
use steer_core::report::AttentionRatioReport;
use steer_core::{jsonl, SCHEMA_VERSION};

use super::{encode_instruction, load_images, load_model, load_prompts, load_vocab, TokensRecord};
use crate::config::Settings;
use crate::error::{CliError, Result};
use crate::output::{write_csv, write_json, write_jsonl};

/// One line of `steps.jsonl`: the full trace of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepsRecord {
    pub id: String,
    pub steps: Vec<StepTrace>,
}

#[derive(Debug, Serialize)]
struct PromptRatio<'a> {
    id: &'a str,
    report: AttentionRatioReport,
}

#[derive(Debug, Serialize)]
struct RatioFile<'a> {
    schema_version: &'static str,
    prompts: Vec<PromptRatio<'a>>,
}

const CSV_HEADER: [&str; 8] = ["id", "step", "layer", "head", "bos", "instruction", "image", "history"];

/// Row of `attention_ratio.csv`.
#[derive(Debug, Serialize)]
struct RatioRow<'a> {
    id: &'a str,
    step: usize,
    layer: usize,
    head: usize,
    bos: f64,
    instruction: f64,
    image: f64,
    history: f64,
}

#[derive(Debug, Serialize)]
struct PromptSettings<'a> {
    id: &'a str,
    decode: DecodeConfig,
    intervention: Option<InterventionConfig>,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    schema_version: &'static str,
    seed: u64,
    model_checksum: String,
    vanilla: bool,
    prompts: Vec<PromptSettings<'a>>,
}

/// Writes `attention_ratio.json` and `attention_ratio.csv` into `out`.
pub fn write_ratio_reports(out: &Path, runs: &[StepsRecord]) -> Result<()> {
    let file = RatioFile {
        schema_version: SCHEMA_VERSION,
        prompts: runs
            .iter()
            .map(|r| PromptRatio {
                id: &r.id,
                report: AttentionRatioReport::from_steps(&r.steps),
            })
            .collect(),
    };
    write_json(&out.join("attention_ratio.json"), &file)?;
    let rows: Vec<RatioRow> = runs
        .iter()
        .flat_map(|r| {
            AttentionRatioReport::head_rows(&r.steps).into_iter().map(|h| RatioRow {
                id: &r.id,
                step: h.step,
                layer: h.layer,
                head: h.head,
                bos: h.bos,
                instruction: h.instruction,
                image: h.image,
                history: h.history,
            })
        })
        .collect();
    write_csv(&out.join("attention_ratio.csv"), &CSV_HEADER, &rows)
}

pub fn run(s: &Settings) -> Result<()> {
    let model = load_model(s)?;
    let vocab = load_vocab(s, &model)?;
    let n_layers = model.n_layers();
    s.intervention.validate(n_layers)?;
    let prompts_path = s.path("prompts", None)?;
    let prompts = load_prompts(s)?;
    let images = if prompts.iter().any(|p| p.image_id.is_some()) {
        load_images(s, &model)?
    } else {
        Default::default()
    };

    let mut jobs = Vec::with_capacity(prompts.len());
    for p in &prompts {
        let instruction = encode_instruction(&vocab, p, &prompts_path)?;
        let image = match &p.image_id {
            Some(id) => images
                .get(id)
                .cloned()
                .ok_or_else(|| steer_core::Error::UnknownImages(vec![id.clone()]))?,
            None => Vec::new(),
        };
        let icfg = s.intervention.resolve(n_layers, image.len());
        let dcfg = s.decode.config(s.seed, &format!("nucleus/{}", p.id), icfg.is_some());
        jobs.push((p, Prompt::new(instruction, p.image_at, image), dcfg, icfg));
    }

    let results: Vec<Result<(TokensRecord, StepsRecord)>> = jobs
        .par_iter()
        .map(|(p, prompt, dcfg, icfg)| {
            let g = generate_with(&model, prompt.clone(), dcfg, *icfg)
                .map_err(|e| CliError::Runtime(format!("prompt {}: {e}", p.id)))?;
            if g.truncated {
                log::warn!("prompt {}: generation stopped at the context limit", p.id);
            }
            let text = vocab.decode(&g.tokens)?.text;
            Ok((
                TokensRecord {
                    id: p.id.clone(),
                    image_id: p.image_id.clone(),
                    tokens: g.tokens,
                    text,
                    finished: g.finished,
                    truncated: g.truncated,
                },
                StepsRecord {
                    id: p.id.clone(),
                    steps: g.steps,
                },
            ))
        })
        .collect();
    let mut tokens = Vec::with_capacity(results.len());
    let mut steps = Vec::with_capacity(results.len());
    for r in results {
        let (t, st) = r?;
        tokens.push(t);
        steps.push(st);
    }

    let captions: Vec<CaptionRecord> = tokens
        .iter()
        .filter_map(|t| {
            t.image_id.as_ref().map(|id| CaptionRecord {
                image_id: id.clone(),
                caption: t.text.clone(),
            })
        })
        .collect();
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        seed: s.seed,
        model_checksum: model.checksum(),
        vanilla: s.intervention.vanilla,
        prompts: jobs
            .iter()
            .map(|(p, _, d, i)| PromptSettings {
                id: &p.id,
                decode: *d,
                intervention: *i,
            })
            .collect(),
    };

    write_jsonl(&s.out.join("tokens.jsonl"), &tokens)?;
    write_jsonl(&s.out.join("captions.jsonl"), &captions)?;
    write_jsonl(&s.out.join("steps.jsonl"), &steps)?;
    write_ratio_reports(&s.out, &steps)?;
    write_json(&s.out.join("run.json"), &manifest)?;
    Ok(())
}

/// `attn-report`: rebuilds the ratio reports from a saved step trace file.
pub fn attn_report(steps_path: &Path, out: &Path) -> Result<()> {
    if !steps_path.is_file() {
        return Err(CliError::config("steps", format!("file not found: {}", steps_path.display())));
    }
    let runs: Vec<StepsRecord> = jsonl::read(steps_path)?;
    write_ratio_reports(out, &runs)
}
