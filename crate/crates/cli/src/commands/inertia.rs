use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;
use steer_core::chair::{truth_map, Lexicon, TruthRecord};
use steer_core::inertia::{
    inertia_rate, locate_hallucinations, probe_case, InertiaCase, LexiconJudge, ProbeRecord, DEFAULT_REGEN_WINDOW,
};
use steer_core::{jsonl, TokenId};

use super::{encode_instruction, load_model, load_prompts, load_vocab, TokensRecord};
use crate::config::{DecodingKind, Settings};
use crate::error::{CliError, Result};
use crate::output::{write_json, write_jsonl};

pub struct InertiaInputs {
    pub generations: Option<PathBuf>,
    pub regen_window: Option<usize>,
}

#[derive(Debug, Serialize)]
struct IdRecord<'a> {
    id: &'a str,
    #[serde(flatten)]
    record: &'a ProbeRecord,
}

struct Job<'a> {
    id: &'a str,
    instruction: Vec<TokenId>,
    history: &'a [TokenId],
    case: InertiaCase,
}

pub fn run(s: &Settings, inputs: &InertiaInputs) -> Result<()> {
    let model = load_model(s)?;
    let vocab = load_vocab(s, &model)?;
    let lex: Lexicon = jsonl::read_json(&s.path("lexicon", None)?)?;
    let truth: Vec<TruthRecord> = jsonl::read(&s.path("truth", None)?)?;
    let truth = truth_map(&truth, &lex);
    let prompts_path = s.path("prompts", None)?;
    let prompts: BTreeMap<String, _> = load_prompts(s)?.into_iter().map(|p| (p.id.clone(), p)).collect();
    let generations: Vec<TokensRecord> = jsonl::read(&s.path("generations", inputs.generations.as_ref())?)?;

    let window = inputs
        .regen_window
        .or(s.file.inertia.regen_window)
        .unwrap_or(DEFAULT_REGEN_WINDOW);
    if window == 0 {
        return Err(CliError::config("inertia.regen_window", "must be at least 1"));
    }
    let mut decode = s.decode;
    decode.kind = match s.file.inertia.decoding.as_deref() {
        None | Some("greedy") => DecodingKind::Greedy,
        Some("nucleus") => DecodingKind::Nucleus,
        Some(other) => {
            return Err(CliError::config(
                "inertia.decoding",
                format!("`{other}` is not one of greedy, nucleus"),
            ))
        }
    };

    let mut jobs = Vec::new();
    for g in &generations {
        let Some(image_id) = &g.image_id else { continue };
        let prompt = prompts.get(&g.id).ok_or_else(|| CliError::File {
            path: prompts_path.clone(),
            reason: format!("no prompt with id `{}` for a generation", g.id),
        })?;
        let objects = truth
            .get(image_id)
            .ok_or_else(|| steer_core::Error::UnknownImages(vec![image_id.clone()]))?;
        let decoded = vocab.decode(&g.tokens)?;
        let instruction = encode_instruction(&vocab, prompt, &prompts_path)?;
        for case in locate_hallucinations(image_id, &g.tokens, &decoded, objects, &lex, window)? {
            jobs.push(Job {
                id: &g.id,
                instruction: instruction.clone(),
                history: &g.tokens,
                case,
            });
        }
    }

    let judge = LexiconJudge { lexicon: &lex };
    let records: Vec<ProbeRecord> = jobs
        .par_iter()
        .map(|j| {
            let label = format!("inertia/{}/{}", j.id, j.case.object);
            let cfg = decode.config(s.seed, &label, false);
            probe_case(&model, &j.instruction, j.history, &j.case, &cfg, &vocab, &judge)
        })
        .collect::<steer_core::Result<_>>()?;
    let rows: Vec<IdRecord> = jobs
        .iter()
        .zip(&records)
        .map(|(j, r)| IdRecord { id: j.id, record: r })
        .collect();
    write_jsonl(&s.out.join("inertia_records.jsonl"), &rows)?;
    write_json(&s.out.join("inertia.json"), &inertia_rate(&records))
}
