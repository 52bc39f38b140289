use std::path::PathBuf;

use serde::Serialize;
use steer_core::chair::{chair_scores, truth_map, CaptionRecord, Lexicon, TruthRecord};
use steer_core::jsonl;

use crate::config::Settings;
use crate::error::Result;
use crate::output::{write_csv, write_json};

pub struct ChairInputs {
    pub captions: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
}

/// Row of `chair_per_image.csv`; object lists are `;`-joined.
#[derive(Debug, Serialize)]
struct ImageRow {
    image_id: String,
    mentioned: String,
    hallucinated: String,
    ground_truth_hits: String,
    ground_truth_size: usize,
}

const CSV_HEADER: [&str; 5] = ["image_id", "mentioned", "hallucinated", "ground_truth_hits", "ground_truth_size"];

pub fn run(s: &Settings, inputs: &ChairInputs) -> Result<()> {
    let lex: Lexicon = jsonl::read_json(&s.path("lexicon", inputs.lexicon.as_ref())?)?;
    let captions: Vec<CaptionRecord> = jsonl::read(&s.path("captions", inputs.captions.as_ref())?)?;
    let truth: Vec<TruthRecord> = jsonl::read(&s.path("truth", inputs.truth.as_ref())?)?;
    let report = chair_scores(&captions, &truth_map(&truth, &lex), &lex)?;
    if report.empty_corpus {
        log::warn!("eval-chair: caption corpus is empty");
    }
    let rows: Vec<ImageRow> = report
        .per_image
        .iter()
        .map(|r| ImageRow {
            image_id: r.image_id.clone(),
            mentioned: r.mentioned.join(";"),
            hallucinated: r.hallucinated.join(";"),
            ground_truth_hits: r.ground_truth_hits.join(";"),
            ground_truth_size: r.ground_truth_size,
        })
        .collect();
    write_json(&s.out.join("chair.json"), &report)?;
    write_csv(&s.out.join("chair_per_image.csv"), &CSV_HEADER, &rows)
}
