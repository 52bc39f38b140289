use std::path::Path;

use steer_core::model::{Model, ModelConfig};
use steer_core::vocab::{Vocabulary, UNK};

use crate::error::Result;
use crate::output::write_json;

/// Caption-style words used to fill a starter vocabulary after the
/// special entries. Tables larger than this list get `tok<N>` fillers.
const WORDS: &[&str] = &[
    "a", "the", "is", "are", "there", "in", "on", "of", "with", "and", "near", "next", "to", "this", "image",
    "describe", "detail", "please", "picture", "yes", "no", "it", "person", "man", "woman", "dog", "cat", "car",
    "bicycle", "chair", "table", "cup", "couch", "tv", "frisbee", "bus", "bird", "horse", "sitting", "standing",
    "street", "grass", "room", "white", "black", "red", "large", "small", "two", "holding", "looking", "front",
    "under", "building", "tree", "water", "plate", "road", "sky", "field", "people",
];

pub fn starter_vocabulary(size: usize) -> Result<Vocabulary> {
    let mut words: Vec<String> = ["<bos>", "<eos>", UNK].iter().map(|s| s.to_string()).collect();
    words.extend(WORDS.iter().map(|s| s.to_string()));
    let mut n = 0;
    while words.len() < size {
        words.push(format!("tok{n}"));
        n += 1;
    }
    words.truncate(size);
    Ok(Vocabulary::new(words)?)
}

/// Writes `<name>.json`, `<name>.bin` and `vocab.json` into `out`.
pub fn run(config: ModelConfig, out: &Path, name: &str) -> Result<()> {
    let model = Model::build(config)?;
    let manifest = model.save(out, name)?;
    log::info!("wrote {} (checksum {})", manifest.display(), model.checksum());
    write_json(&out.join("vocab.json"), &starter_vocabulary(model.config().vocab_size)?)
}
