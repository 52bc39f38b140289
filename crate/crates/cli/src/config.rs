//! Run configuration: a TOML file merged with command-line overrides.
//!
//! Paths in the file are relative to the file's directory; paths given as
//! flags are relative to the working directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use steer_core::decoding::{DecodeConfig, Strategy};
use steer_core::intervention::{InterventionConfig, LayerGate, SpanSelector};
use steer_core::model::EOS_ID;
use steer_core::pope::{DialogueMode, Split};
use steer_core::seed::derive_seed;

use crate::error::{CliError, Result};

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_BEAMS: usize = 5;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 512;
pub const DEFAULT_TOP_P: f32 = 0.9;
pub const DEFAULT_TEMPERATURE: f32 = 1.0;
pub const DEFAULT_POPE_QUESTIONS: usize = 6;
pub const DEFAULT_POPE_ANSWER_TOKENS: usize = 8;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub image_tokens: Option<usize>,
    pub captions: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub answers: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    #[serde(default)]
    pub intervention: InterventionSection,
    #[serde(default)]
    pub decoding: DecodingSection,
    #[serde(default)]
    pub pope: PopeSection,
    #[serde(default)]
    pub inertia: InertiaSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSection {
    pub alpha: Option<f32>,
    pub gamma: Option<f32>,
    pub gate: Option<GateSection>,
    pub vanilla: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    pub kind: String,
    pub start_layer: Option<usize>,
    pub threshold: Option<f32>,
}

impl GateSection {
    fn resolve(&self) -> Result<LayerGate> {
        match self.kind.as_str() {
            "all_layers" => Ok(LayerGate::AllLayers),
            "from_layer" => Ok(LayerGate::FromLayer {
                start_layer: self
                    .start_layer
                    .ok_or_else(|| CliError::config("gate.start_layer", "required for kind `from_layer`"))?,
            }),
            "similarity" => Ok(LayerGate::Similarity {
                threshold: self
                    .threshold
                    .ok_or_else(|| CliError::config("gate.threshold", "required for kind `similarity`"))?,
            }),
            other => Err(CliError::config(
                "gate.kind",
                format!("`{other}` is not one of all_layers, from_layer, similarity"),
            )),
        }
    }
}

/// Parses the `--gate` flag: `all`, `from:<layer>` or `sim:<threshold>`.
pub fn parse_gate(s: &str) -> std::result::Result<LayerGate, String> {
    let bad = || format!("expected `all`, `from:<layer>` or `sim:<threshold>`, got `{s}`");
    match s.split_once(':') {
        None if s == "all" => Ok(LayerGate::AllLayers),
        Some(("from", v)) => v
            .parse()
            .map(|start_layer| LayerGate::FromLayer { start_layer })
            .map_err(|_| bad()),
        Some(("sim", v)) => v
            .parse()
            .map(|threshold| LayerGate::Similarity { threshold })
            .map_err(|_| bad()),
        _ => Err(bad()),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingSection {
    pub strategy: Option<String>,
    pub beams: Option<usize>,
    pub top_p: Option<f32>,
    pub temperature: Option<f32>,
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopeSection {
    pub split: Option<String>,
    pub n_images: Option<usize>,
    pub questions_per_image: Option<usize>,
    pub mode: Option<String>,
    pub max_answer_tokens: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InertiaSection {
    pub regen_window: Option<usize>,
    pub decoding: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DecodingKind {
    Greedy,
    Beam,
    Nucleus,
}

fn decoding_kind(key: &str, s: &str) -> Result<DecodingKind> {
    match s {
        "greedy" => Ok(DecodingKind::Greedy),
        "beam" => Ok(DecodingKind::Beam),
        "nucleus" => Ok(DecodingKind::Nucleus),
        other => Err(CliError::config(key, format!("`{other}` is not one of greedy, beam, nucleus"))),
    }
}

pub fn parse_split(key: &str, s: &str) -> Result<Split> {
    match s {
        "random" => Ok(Split::Random),
        "popular" => Ok(Split::Popular),
        "adversarial" => Ok(Split::Adversarial),
        other => Err(CliError::config(key, format!("`{other}` is not one of random, popular, adversarial"))),
    }
}

pub fn parse_mode(key: &str, s: &str) -> Result<DialogueMode> {
    match s {
        "single_turn" | "single" => Ok(DialogueMode::SingleTurn),
        "multi_turn" | "multi" => Ok(DialogueMode::MultiTurn),
        other => Err(CliError::config(key, format!("`{other}` is not one of single_turn, multi_turn"))),
    }
}

/// Values given on the command line; each one wins over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub alpha: Option<f32>,
    pub gamma: Option<f32>,
    pub gate: Option<LayerGate>,
    pub decoding: Option<DecodingKind>,
    pub beams: Option<usize>,
    pub top_p: Option<f32>,
    pub temperature: Option<f32>,
    pub max_new_tokens: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub vanilla: bool,
}

/// Intervention settings before the per-prompt defaults are filled in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterventionSettings {
    pub alpha: Option<f32>,
    pub gamma: Option<f32>,
    pub gate: Option<LayerGate>,
    pub vanilla: bool,
}

impl InterventionSettings {
    /// `None` for a vanilla run; otherwise the configured values with
    /// unset ones taken from the model defaults for this image span.
    pub fn resolve(&self, n_layers: usize, image_tokens: usize) -> Option<InterventionConfig> {
        if self.vanilla {
            return None;
        }
        let d = InterventionConfig::defaults(n_layers, image_tokens);
        Some(InterventionConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            gamma: self.gamma.unwrap_or(d.gamma),
            gate: self.gate.unwrap_or(d.gate),
            target: SpanSelector::Image,
        })
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let Some(c) = self.resolve(n_layers, 0) {
            c.validate(n_layers)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeSettings {
    pub kind: DecodingKind,
    pub beams: usize,
    pub top_p: f32,
    pub temperature: f32,
    pub max_new_tokens: usize,
}

impl DecodeSettings {
    /// Decode config for one unit of work; nucleus seeds are split from
    /// `root` by `label`.
    pub fn config(&self, root: u64, label: &str, contrastive: bool) -> DecodeConfig {
        let strategy = match self.kind {
            DecodingKind::Greedy => Strategy::Greedy,
            DecodingKind::Beam => Strategy::Beam { width: self.beams },
            DecodingKind::Nucleus => Strategy::Nucleus {
                top_p: self.top_p,
                temperature: self.temperature,
                seed: derive_seed(root, label),
            },
        };
        DecodeConfig {
            strategy,
            max_new_tokens: self.max_new_tokens,
            eos_id: EOS_ID,
            contrastive,
        }
    }

    /// Checks every value, including ones the chosen strategy ignores.
    pub fn validate(&self) -> Result<()> {
        for kind in [DecodingKind::Greedy, DecodingKind::Beam, DecodingKind::Nucleus] {
            DecodeSettings { kind, ..*self }.config(0, "", false).validate()?;
        }
        Ok(())
    }
}

pub struct Settings {
    base: PathBuf,
    pub file: FileConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub intervention: InterventionSettings,
    pub decode: DecodeSettings,
}

impl Settings {
    pub fn load(config: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let (base, file) = match config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let file: FileConfig = toml::from_str(&text).map_err(|e| CliError::File {
                    path: p.to_path_buf(),
                    reason: e.to_string(),
                })?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (base, file)
            }
            None => (PathBuf::new(), FileConfig::default()),
        };
        let gate = match (&ov.gate, &file.intervention.gate) {
            (Some(g), _) => Some(*g),
            (None, Some(g)) => Some(g.resolve()?),
            (None, None) => None,
        };
        let kind = match (ov.decoding, &file.decoding.strategy) {
            (Some(k), _) => k,
            (None, Some(s)) => decoding_kind("decoding.strategy", s)?,
            (None, None) => DecodingKind::Greedy,
        };
        let out = match (&ov.out, &file.out) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => base.join(o),
            (None, None) => PathBuf::from("out"),
        };
        let d = &file.decoding;
        let settings = Settings {
            seed: ov.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            out,
            intervention: InterventionSettings {
                alpha: ov.alpha.or(file.intervention.alpha),
                gamma: ov.gamma.or(file.intervention.gamma),
                gate,
                vanilla: ov.vanilla || file.intervention.vanilla.unwrap_or(false),
            },
            decode: DecodeSettings {
                kind,
                beams: ov.beams.or(d.beams).unwrap_or(DEFAULT_BEAMS),
                top_p: ov.top_p.or(d.top_p).unwrap_or(DEFAULT_TOP_P),
                temperature: ov.temperature.or(d.temperature).unwrap_or(DEFAULT_TEMPERATURE),
                max_new_tokens: ov.max_new_tokens.or(d.max_new_tokens).unwrap_or(DEFAULT_MAX_NEW_TOKENS),
            },
            base,
            file,
        };
        settings.decode.validate()?;
        Ok(settings)
    }

    /// An input path: the flag if given, else the file key. The file must
    /// exist.
    pub fn path(&self, key: &str, flag: Option<&PathBuf>) -> Result<PathBuf> {
        let p = match (flag, self.file_path(key)) {
            (Some(f), _) => f.clone(),
            (None, Some(p)) => self.base.join(p),
            (None, None) => {
                return Err(CliError::config(key, "not set; pass it in the config file or as a flag"));
            }
        };
        if !p.is_file() {
            return Err(CliError::config(key, format!("file not found: {}", p.display())));
        }
        Ok(p)
    }

    fn file_path(&self, key: &str) -> Option<&PathBuf> {
        let f = &self.file;
        match key {
            "model" => f.model.as_ref(),
            "vocab" => f.vocab.as_ref(),
            "prompts" => f.prompts.as_ref(),
            "images" => f.images.as_ref(),
            "captions" => f.captions.as_ref(),
            "truth" => f.truth.as_ref(),
            "lexicon" => f.lexicon.as_ref(),
            "annotations" => f.annotations.as_ref(),
            "items" => f.items.as_ref(),
            "answers" => f.answers.as_ref(),
            "generations" => f.generations.as_ref(),
            _ => None,
        }
    }

    pub fn has_path(&self, key: &str) -> bool {
        self.file_path(key).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<Settings> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, text).unwrap();
        Settings::load(Some(&p), &Overrides::default())
    }

    fn key_of(e: CliError) -> String {
        match e {
            CliError::Config { key, .. } => key,
            CliError::Core(steer_core::Error::Config { key, .. }) => key,
            other => panic!("not a config error: {other}"),
        }
    }

    #[test]
    fn gate_flag_forms() {
        assert_eq!(parse_gate("all").unwrap(), LayerGate::AllLayers);
        assert_eq!(parse_gate("from:3").unwrap(), LayerGate::FromLayer { start_layer: 3 });
        assert_eq!(parse_gate("sim:0.5").unwrap(), LayerGate::Similarity { threshold: 0.5 });
        assert!(parse_gate("from:x").is_err());
        assert!(parse_gate("every").is_err());
    }

    #[test]
    fn file_values_and_overrides() {
        let s = load("seed = 3\n[decoding]\nstrategy = \"beam\"\nbeams = 4\n[intervention]\nalpha = 0.3\ngate = { kind = \"similarity\", threshold = 0.8 }\n").unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.decode.kind, DecodingKind::Beam);
        assert_eq!(s.decode.beams, 4);
        assert_eq!(s.decode.max_new_tokens, DEFAULT_MAX_NEW_TOKENS);
        assert_eq!(s.intervention.gate, Some(LayerGate::Similarity { threshold: 0.8 }));
        let r = s.intervention.resolve(4, 100).unwrap();
        assert_eq!((r.alpha, r.gamma), (0.3, 1.1));

        let ov = Overrides {
            beams: Some(2),
            alpha: Some(0.0),
            ..Overrides::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[decoding]\nbeams = 9\n[intervention]\nalpha = 0.3\n").unwrap();
        let s = Settings::load(Some(&p), &ov).unwrap();
        assert_eq!(s.decode.beams, 2);
        assert_eq!(s.intervention.alpha, Some(0.0));
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(load("[decoding]\nstrategy = \"topk\"\n").err().unwrap()), "decoding.strategy");
        assert_eq!(key_of(load("[decoding]\nbeams = 0\n").err().unwrap()), "beams");
        assert_eq!(key_of(load("[decoding]\nstrategy = \"nucleus\"\ntop_p = 1.5\n").err().unwrap()), "top_p");
        assert_eq!(key_of(load("[intervention]\ngate = { kind = \"from_layer\" }\n").err().unwrap()), "gate.start_layer");
        let e = load("[intervention]\nalpah = 1.0\n").err().unwrap();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("alpah"), "{e}");
    }

    #[test]
    fn missing_path_is_reported() {
        let s = load("model = \"nowhere.json\"\n").unwrap();
        let e = s.path("model", None).err().unwrap();
        assert!(e.to_string().contains("nowhere.json"));
        assert_eq!(e.exit_code(), 2);
        assert_eq!(key_of(s.path("vocab", None).err().unwrap()), "vocab");
    }
}
