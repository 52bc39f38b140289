//! CHAIR hallucination metrics and object-level F1.
//!
//! Objects are found by phrase matching against a [`Lexicon`]: captions are
//! split into alphanumeric words, and at each word the longest surface form
//! that matches is taken, after which matching resumes past it. Each caption
//! contributes its set of unique mentioned objects.
//!
//! - `CHAIR_I` = hallucinated unique mentions / all unique mentions
//! - `CHAIR_S` = captions with a hallucination / all captions
//! - precision = correct unique mentions / all unique mentions; recall =
//!   correct unique mentions / ground-truth objects; F1 is their harmonic mean.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical object names and the surface forms that refer to them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "LexiconFile", into = "LexiconFile")]
pub struct Lexicon {
    canonical: BTreeSet<String>,
    synonyms: BTreeMap<String, String>,
    /// First word → (phrase words, canonical), longest phrase first.
    phrases: HashMap<String, Vec<(Vec<String>, String)>>,
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    canonical: Vec<String>,
    #[serde(default)]
    synonyms: BTreeMap<String, String>,
}

impl TryFrom<LexiconFile> for Lexicon {
    type Error = Error;

    fn try_from(f: LexiconFile) -> Result<Self> {
        Lexicon::new(f.canonical, f.synonyms)
    }
}

impl From<Lexicon> for LexiconFile {
    fn from(l: Lexicon) -> Self {
        LexiconFile {
            canonical: l.canonical.into_iter().collect(),
            synonyms: l.synonyms,
        }
    }
}

/// Lowercased alphanumeric words with their character offsets.
pub fn words(text: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut current: Option<(usize, String)> = None;
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() {
            let entry = current.get_or_insert_with(|| (i, String::new()));
            entry.1.extend(c.to_lowercase());
        } else if let Some(w) = current.take() {
            out.push(w);
        }
    }
    out.extend(current);
    out
}

impl Lexicon {
    /// Every canonical name also matches itself. Synonym targets must be
    /// canonical names.
    pub fn new(
        canonical: impl IntoIterator<Item = String>,
        synonyms: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let canonical: BTreeSet<String> = canonical.into_iter().map(|c| c.to_lowercase()).collect();
        let mut syn = BTreeMap::new();
        for (surface, target) in synonyms {
            let target = target.to_lowercase();
            if !canonical.contains(&target) {
                return Err(Error::InvalidArgument(format!(
                    "synonym `{surface}` maps to unknown object `{target}`"
                )));
            }
            syn.insert(surface.to_lowercase(), target);
        }
        let mut surfaces: BTreeMap<Vec<String>, String> = BTreeMap::new();
        for c in &canonical {
            let w: Vec<String> = words(c).into_iter().map(|(_, w)| w).collect();
            if !w.is_empty() {
                surfaces.insert(w, c.clone());
            }
        }
        for (s, c) in &syn {
            let w: Vec<String> = words(s).into_iter().map(|(_, w)| w).collect();
            if !w.is_empty() {
                surfaces.insert(w, c.clone());
            }
        }
        let mut phrases: HashMap<String, Vec<(Vec<String>, String)>> = HashMap::new();
        for (w, c) in surfaces {
            phrases.entry(w[0].clone()).or_default().push((w, c));
        }
        for list in phrases.values_mut() {
            list.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        Ok(Self {
            canonical,
            synonyms: syn,
            phrases,
        })
    }

    pub fn canonical(&self) -> &BTreeSet<String> {
        &self.canonical
    }

    pub fn synonyms(&self) -> &BTreeMap<String, String> {
        &self.synonyms
    }

    /// Canonical name for a surface form or canonical name, if known.
    pub fn resolve(&self, name: &str) -> Option<&str> {
        let key = name.to_lowercase();
        if let Some(c) = self.canonical.get(&key) {
            return Some(c.as_str());
        }
        self.synonyms.get(&key).map(String::as_str)
    }
}

/// A matched object mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub object: String,
    /// Character offset of the first matched word.
    pub offset: usize,
}

/// Finds object mentions in order, longest phrase first, non-overlapping.
pub fn extract_objects(caption: &str, lex: &Lexicon) -> Vec<Mention> {
    let ws = words(caption);
    let mut out = Vec::new();
    let mut i = 0;
    while i < ws.len() {
        let matched = lex.phrases.get(&ws[i].1).and_then(|cands| {
            cands.iter().find(|(phrase, _)| {
                i + phrase.len() <= ws.len() && phrase.iter().zip(&ws[i..]).all(|(p, (_, w))| p == w)
            })
        });
        match matched {
            Some((phrase, canonical)) => {
                out.push(Mention {
                    object: canonical.clone(),
                    offset: ws[i].0,
                });
                i += phrase.len();
            }
            None => i += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub image_id: String,
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageChair {
    pub image_id: String,
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
    pub ground_truth_hits: Vec<String>,
    pub ground_truth_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub schema_version: String,
    pub chair_s: f64,
    pub chair_i: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_captions: usize,
    pub total_mentioned: usize,
    pub total_hallucinated: usize,
    pub total_hits: usize,
    pub total_ground_truth: usize,
    pub empty_corpus: bool,
    pub per_image: Vec<ImageChair>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Builds the `image_id → canonical objects` map, resolving names through
/// the lexicon where possible.
pub fn truth_map(records: &[TruthRecord], lex: &Lexicon) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        let set = out.entry(r.image_id.clone()).or_default();
        for o in &r.objects {
            set.insert(lex.resolve(o).map_or_else(|| o.to_lowercase(), str::to_string));
        }
    }
    out
}

pub fn chair_scores(
    captions: &[CaptionRecord],
    truth: &BTreeMap<String, BTreeSet<String>>,
    lex: &Lexicon,
) -> Result<ChairReport> {
    let mut unknown: Vec<String> = captions
        .iter()
        .filter(|c| !truth.contains_key(&c.image_id))
        .map(|c| c.image_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(Error::UnknownImages(unknown));
    }

    let mut per_image = Vec::with_capacity(captions.len());
    let (mut mentioned, mut hallucinated, mut hits, mut gt, mut bad_captions) = (0, 0, 0, 0, 0);
    for c in captions {
        let objects = &truth[&c.image_id];
        let unique: BTreeSet<String> = extract_objects(&c.caption, lex).into_iter().map(|m| m.object).collect();
        let halluc: Vec<String> = unique.iter().filter(|o| !objects.contains(*o)).cloned().collect();
        let hit: Vec<String> = unique.iter().filter(|o| objects.contains(*o)).cloned().collect();
        mentioned += unique.len();
        hallucinated += halluc.len();
        hits += hit.len();
        gt += objects.len();
        bad_captions += usize::from(!halluc.is_empty());
        per_image.push(ImageChair {
            image_id: c.image_id.clone(),
            mentioned: unique.into_iter().collect(),
            hallucinated: halluc,
            ground_truth_hits: hit,
            ground_truth_size: objects.len(),
        });
    }
    per_image.sort();

    let precision = ratio(hits, mentioned);
    let recall = ratio(hits, gt);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ChairReport {
        schema_version: crate::SCHEMA_VERSION.to_string(),
        chair_s: ratio(bad_captions, captions.len()),
        chair_i: ratio(hallucinated, mentioned),
        precision,
        recall,
        f1,
        n_captions: captions.len(),
        total_mentioned: mentioned,
        total_hallucinated: hallucinated,
        total_hits: hits,
        total_ground_truth: gt,
        empty_corpus: captions.is_empty(),
        per_image,
    })
}
