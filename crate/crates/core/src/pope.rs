//! Polling-based object probing: balanced yes/no existence questions.
//!
//! For each image, half of the questions ask about objects that are present
//! and half about absent objects chosen by the split rule:
//!
//! - `Random`: uniform sample of absent objects.
//! - `Popular`: absent objects with the highest corpus frequency.
//! - `Adversarial`: absent objects that co-occur most with the image's
//!   present objects (sum of pairwise co-occurrence image counts).
//!
//! Ties in the ranked splits are broken alphabetically. Questions are
//! ordered present, absent, present, absent, and so on.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Random,
    Popular,
    Adversarial,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Random => "random",
            Split::Popular => "popular",
            Split::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Present,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PopeItem {
    pub image_id: String,
    pub object: String,
    pub label: Label,
    pub split: Split,
    pub turn_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    Unparseable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueMode {
    SingleTurn,
    MultiTurn,
}

/// Object frequencies and pairwise co-occurrence, counted in images.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectStats {
    pub frequency: BTreeMap<String, usize>,
    /// Symmetric: `cooccurrence[a][b]` = images containing both `a` and `b`.
    pub cooccurrence: BTreeMap<String, BTreeMap<String, usize>>,
}

impl ObjectStats {
    pub fn from_annotations(annotations: &BTreeMap<String, BTreeSet<String>>) -> Self {
        let mut stats = ObjectStats::default();
        for objects in annotations.values() {
            for a in objects {
                *stats.frequency.entry(a.clone()).or_default() += 1;
                for b in objects {
                    if a != b {
                        *stats
                            .cooccurrence
                            .entry(a.clone())
                            .or_default()
                            .entry(b.clone())
                            .or_default() += 1;
                    }
                }
            }
        }
        stats
    }

    pub fn cooccur(&self, a: &str, b: &str) -> usize {
        self.cooccurrence
            .get(a)
            .and_then(|m| m.get(b))
            .copied()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitParams {
    pub split: Split,
    pub n_images: usize,
    pub q_per_image: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBuild {
    pub items: Vec<PopeItem>,
    pub skipped: Vec<SkippedImage>,
}

/// Absent objects for one image, best first, under a ranked split rule.
fn ranked_absent(split: Split, present: &BTreeSet<String>, absent: &[String], stats: &ObjectStats) -> Vec<String> {
    let score = |o: &String| -> usize {
        match split {
            Split::Popular => stats.frequency.get(o).copied().unwrap_or(0),
            Split::Adversarial => present.iter().map(|p| stats.cooccur(o, p)).sum(),
            Split::Random => 0,
        }
    };
    let mut ranked: Vec<(usize, &String)> = absent.iter().map(|o| (score(o), o)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    ranked.into_iter().map(|(_, o)| o.clone()).collect()
}

/// Builds split items. Objects are drawn from the keys of
/// `stats.frequency`; all sampling uses seeds derived from `params.seed`
/// and the image id.
pub fn build_splits(
    annotations: &BTreeMap<String, BTreeSet<String>>,
    stats: &ObjectStats,
    params: &SplitParams,
) -> Result<SplitBuild> {
    let q = params.q_per_image;
    if q == 0 || !q.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "questions per image must be a positive even number, got {q}"
        )));
    }
    let half = q / 2;
    let universe: Vec<&String> = stats.frequency.keys().collect();

    let mut eligible = Vec::new();
    let mut skipped = Vec::new();
    for (image_id, present) in annotations {
        let absent_count = universe.iter().filter(|o| !present.contains(**o)).count();
        let reason = if present.len() < half {
            Some(format!("{} present objects, need {half}", present.len()))
        } else if absent_count < half {
            Some(format!("{absent_count} absent candidates, need {half}"))
        } else {
            None
        };
        match reason {
            Some(reason) => {
                log::warn!("pope: skipping image {image_id}: {reason}");
                skipped.push(SkippedImage {
                    image_id: image_id.clone(),
                    reason,
                });
            }
            None => eligible.push((image_id, present)),
        }
    }

    if params.n_images < eligible.len() {
        let mut rng = stream_rng(params.seed, "pope/images");
        let mut picked = sample(&mut rng, eligible.len(), params.n_images).into_vec();
        picked.sort_unstable();
        eligible = picked.into_iter().map(|i| eligible[i]).collect();
    }

    let mut items = Vec::with_capacity(eligible.len() * q);
    for (image_id, present) in eligible {
        let present_list: Vec<&String> = present.iter().collect();
        let mut rng = stream_rng(params.seed, &format!("pope/{}/{image_id}", params.split.as_str()));
        let mut chosen_present: Vec<String> = sample(&mut rng, present_list.len(), half)
            .into_iter()
            .map(|i| present_list[i].clone())
            .collect();
        chosen_present.sort();

        let absent: Vec<String> = universe
            .iter()
            .filter(|o| !present.contains(**o))
            .map(|o| (*o).clone())
            .collect();
        let chosen_absent: Vec<String> = match params.split {
            Split::Random => {
                let mut picked: Vec<String> = sample(&mut rng, absent.len(), half)
                    .into_iter()
                    .map(|i| absent[i].clone())
                    .collect();
                picked.sort();
                picked
            }
            rule => ranked_absent(rule, present, &absent, stats).into_iter().take(half).collect(),
        };

        for (k, (p, a)) in chosen_present.into_iter().zip(chosen_absent).enumerate() {
            for (offset, object, label) in [(0, p, Label::Present), (1, a, Label::Absent)] {
                items.push(PopeItem {
                    image_id: image_id.clone(),
                    object,
                    label,
                    split: params.split,
                    turn_index: 2 * k + offset,
                });
            }
        }
    }
    Ok(SplitBuild { items, skipped })
}

pub fn render_question(item: &PopeItem) -> Result<String> {
    let object = item.object.trim();
    if object.is_empty() {
        return Err(Error::InvalidArgument("empty object name".to_string()));
    }
    Ok(format!("Is there a {object} in the image?"))
}

/// First `yes`/`no` word wins, case-insensitively.
pub fn parse_answer(text: &str) -> Answer {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .find_map(|w| match w.to_lowercase().as_str() {
            "yes" => Some(Answer::Yes),
            "no" => Some(Answer::No),
            _ => None,
        })
        .unwrap_or(Answer::Unparseable)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub schema_version: String,
    pub mode: DialogueMode,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
    pub confusion: Confusion,
    /// Answers that were neither yes nor no; scored as wrong.
    pub unparseable: usize,
}

pub fn score(items: &[(PopeItem, Answer)], mode: DialogueMode) -> PopeReport {
    let mut c = Confusion::default();
    let mut unparseable = 0;
    let mut yes = 0;
    for (item, answer) in items {
        match (item.label, answer) {
            (Label::Present, Answer::Yes) => c.tp += 1,
            (Label::Absent, Answer::Yes) => c.fp += 1,
            (Label::Absent, Answer::No) => c.tn += 1,
            (Label::Present, Answer::No) => c.fn_ += 1,
            (Label::Present, Answer::Unparseable) => c.fn_ += 1,
            (Label::Absent, Answer::Unparseable) => c.fp += 1,
        }
        unparseable += usize::from(*answer == Answer::Unparseable);
        yes += usize::from(*answer == Answer::Yes);
    }
    let total = c.total();
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    PopeReport {
        schema_version: crate::SCHEMA_VERSION.to_string(),
        mode,
        accuracy: div(c.tp + c.tn, total),
        precision: div(c.tp, c.tp + c.fp),
        recall: div(c.tp, c.tp + c.fn_),
        f1: div(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        yes_ratio: div(yes, total),
        confusion: c,
        unparseable,
    }
}

/// One prior exchange in a multi-turn transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub image_id: String,
    pub question: String,
    pub history: Vec<Turn>,
}

impl ChatPrompt {
    /// History rendered as `question answer` pairs separated by spaces.
    pub fn history_text(&self) -> String {
        self.history
            .iter()
            .map(|t| format!("{} {}", t.question, t.answer))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Prompts for one image's items, ordered by `turn_index`.
///
/// In multi-turn mode the prompt for turn `k` carries the questions and
/// `answers` of turns `0..k`; `answers` must cover them. Single-turn
/// prompts never carry history.
pub fn build_transcript(items: &[PopeItem], mode: DialogueMode, answers: &[String]) -> Result<Vec<ChatPrompt>> {
    let mut ordered: Vec<&PopeItem> = items.iter().collect();
    ordered.sort_by_key(|i| i.turn_index);
    let questions = ordered
        .iter()
        .map(|i| render_question(i))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(ordered.len());
    for (k, item) in ordered.iter().enumerate() {
        let history = match mode {
            DialogueMode::SingleTurn => Vec::new(),
            DialogueMode::MultiTurn => {
                if answers.len() < k {
                    return Err(Error::InvalidArgument(format!(
                        "turn {k} needs {k} earlier answers, got {}",
                        answers.len()
                    )));
                }
                (0..k)
                    .map(|j| Turn {
                        question: questions[j].clone(),
                        answer: answers[j].clone(),
                    })
                    .collect()
            }
        };
        out.push(ChatPrompt {
            image_id: item.image_id.clone(),
            question: questions[k].clone(),
            history,
        });
    }
    Ok(out)
}

/// Produces a free-text answer for a chat prompt.
pub trait Answerer: Sync {
    fn answer(&self, prompt: &ChatPrompt) -> Result<String>;
}

/// Runs every item through `answerer`, image by image.
///
/// Images are processed in parallel; within an image turns run in order so
/// multi-turn prompts see earlier answers. Output keeps the item order of
/// `(image_id, turn_index)`.
pub fn run_items<A: Answerer + ?Sized>(
    items: &[PopeItem],
    mode: DialogueMode,
    answerer: &A,
) -> Result<Vec<(PopeItem, String)>> {
    use rayon::prelude::*;

    let mut by_image: BTreeMap<&str, Vec<PopeItem>> = BTreeMap::new();
    for item in items {
        by_image.entry(&item.image_id).or_default().push(item.clone());
    }
    let per_image: Vec<Result<Vec<(PopeItem, String)>>> = by_image
        .into_par_iter()
        .map(|(_, mut group)| {
            group.sort_by_key(|i| i.turn_index);
            let mut answers: Vec<String> = Vec::with_capacity(group.len());
            for k in 0..group.len() {
                let prompts = build_transcript(&group[..=k], mode, &answers)?;
                answers.push(answerer.answer(&prompts[k])?);
            }
            Ok(group.into_iter().zip(answers).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(items.len());
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(object: &str, label: Label) -> PopeItem {
        PopeItem {
            image_id: "1".into(),
            object: object.into(),
            label,
            split: Split::Random,
            turn_index: 0,
        }
    }

    fn ann(entries: &[(&str, &[&str])]) -> BTreeMap<String, BTreeSet<String>> {
        entries
            .iter()
            .map(|(id, objs)| (id.to_string(), objs.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn question_template() {
        assert_eq!(render_question(&item("dog", Label::Present)).unwrap(), "Is there a dog in the image?");
        assert_eq!(
            render_question(&item("hot dog", Label::Present)).unwrap(),
            "Is there a hot dog in the image?"
        );
        assert!(render_question(&item(" ", Label::Present)).is_err());
    }

    #[test]
    fn answers_parse() {
        assert_eq!(parse_answer("Yes, there is a dog."), Answer::Yes);
        assert_eq!(parse_answer("no"), Answer::No);
        assert_eq!(parse_answer("Maybe."), Answer::Unparseable);
        assert_eq!(parse_answer("  ...NO!"), Answer::No);
        assert_eq!(parse_answer("nothing, yes"), Answer::Yes);
    }

    #[test]
    fn score_formula() {
        let mut items = Vec::new();
        items.extend((0..3).map(|_| (item("a", Label::Present), Answer::Yes)));
        items.push((item("b", Label::Absent), Answer::Yes));
        items.extend((0..2).map(|_| (item("c", Label::Absent), Answer::No)));
        let r = score(&items, DialogueMode::SingleTurn);
        assert_eq!(r.confusion, Confusion { tp: 3, fp: 1, tn: 2, fn_: 0 });
        assert!((r.accuracy - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.f1 - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn unparseable_counts_as_wrong() {
        let items = vec![
            (item("a", Label::Present), Answer::Unparseable),
            (item("b", Label::Absent), Answer::Unparseable),
        ];
        let r = score(&items, DialogueMode::SingleTurn);
        assert_eq!(r.confusion, Confusion { tp: 0, fp: 1, tn: 0, fn_: 1 });
        assert_eq!(r.unparseable, 2);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn splits_are_balanced_and_ordered() {
        let a = ann(&[
            ("1", &["dog", "cat", "car", "bus"]),
            ("2", &["dog", "cup", "fork", "knife"]),
            ("3", &["tv", "sofa", "cat", "chair"]),
        ]);
        let stats = ObjectStats::from_annotations(&a);
        for split in [Split::Random, Split::Popular, Split::Adversarial] {
            let b = build_splits(
                &a,
                &stats,
                &SplitParams {
                    split,
                    n_images: 10,
                    q_per_image: 6,
                    seed: 1,
                },
            )
            .unwrap();
            assert_eq!(b.items.len(), 18);
            for id in ["1", "2", "3"] {
                let mine: Vec<&PopeItem> = b.items.iter().filter(|i| i.image_id == id).collect();
                assert_eq!(mine.iter().filter(|i| i.label == Label::Present).count(), 3);
                assert_eq!(mine.iter().filter(|i| i.label == Label::Absent).count(), 3);
                for i in &mine {
                    assert_eq!(a[id].contains(&i.object), i.label == Label::Present);
                    assert_eq!(i.label == Label::Present, i.turn_index % 2 == 0);
                }
            }
        }
    }

    #[test]
    fn popular_picks_most_frequent_absent() {
        let a = ann(&[
            ("1", &["dog", "cat"]),
            ("2", &["dog", "cup"]),
            ("3", &["dog", "cup"]),
            ("4", &["cat", "fork"]),
        ]);
        let stats = ObjectStats::from_annotations(&a);
        let b = build_splits(
            &a,
            &stats,
            &SplitParams {
                split: Split::Popular,
                n_images: 4,
                q_per_image: 2,
                seed: 0,
            },
        )
        .unwrap();
        let absent_of = |id: &str| {
            b.items
                .iter()
                .find(|i| i.image_id == id && i.label == Label::Absent)
                .unwrap()
                .object
                .clone()
        };
        assert_eq!(absent_of("4"), "dog");
        // Image 1 has dog; next most frequent are cat(2, present) then cup(2).
        assert_eq!(absent_of("1"), "cup");
    }

    #[test]
    fn short_images_are_skipped() {
        let a = ann(&[("1", &["dog"]), ("2", &["dog", "cat", "cup"]), ("3", &["a", "b", "c"])]);
        let stats = ObjectStats::from_annotations(&a);
        let b = build_splits(
            &a,
            &stats,
            &SplitParams {
                split: Split::Random,
                n_images: 10,
                q_per_image: 4,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(b.skipped.len(), 1);
        assert_eq!(b.skipped[0].image_id, "1");
        assert!(build_splits(
            &a,
            &stats,
            &SplitParams {
                split: Split::Random,
                n_images: 1,
                q_per_image: 3,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn transcripts() {
        let items: Vec<PopeItem> = (0..6)
            .map(|k| PopeItem {
                turn_index: k,
                ..item(&format!("obj{k}"), Label::Present)
            })
            .collect();
        let single = build_transcript(&items, DialogueMode::SingleTurn, &[]).unwrap();
        assert_eq!(single.len(), 6);
        assert!(single.iter().all(|p| p.history.is_empty()));

        let answers: Vec<String> = (0..6).map(|k| format!("yes{k}")).collect();
        let multi = build_transcript(&items, DialogueMode::MultiTurn, &answers).unwrap();
        assert_eq!(multi[2].history.len(), 2);
        assert_eq!(multi[2].history[1].answer, "yes1");
        assert_eq!(multi[2].history[0].question, "Is there a obj0 in the image?");
        let lens: Vec<usize> = multi.iter().map(|p| p.history_text().len()).collect();
        assert!(lens.windows(2).all(|w| w[0] < w[1]));
        assert!(build_transcript(&items, DialogueMode::MultiTurn, &answers[..1]).is_err());
    }
}
