use serde::{Deserialize, Serialize};

use super::{Model, BOS_ID};
use crate::attention::TokenSpan;
use crate::error::{Error, Result};
use crate::TokenId;

/// Position bookkeeping for a spliced multimodal prompt.
///
/// Order is fixed: BOS, the first `m` instruction tokens, the image tokens,
/// the remaining instruction tokens, then generated history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub bos: TokenSpan,
    pub instr_prefix: TokenSpan,
    pub image: TokenSpan,
    pub instr_suffix: TokenSpan,
    pub history: TokenSpan,
}

/// Content class of a prompt position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Bos,
    Instruction,
    Image,
    History,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Bos,
        Category::Instruction,
        Category::Image,
        Category::History,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Bos => "bos",
            Category::Instruction => "instruction",
            Category::Image => "image",
            Category::History => "history",
        }
    }
}

impl PromptLayout {
    /// Layout for the given segment lengths.
    pub fn from_lengths(prefix: usize, image: usize, suffix: usize, history: usize) -> Self {
        let bos = TokenSpan::with_len(0, 1);
        let instr_prefix = TokenSpan::with_len(bos.end, prefix);
        let image = TokenSpan::with_len(instr_prefix.end, image);
        let instr_suffix = TokenSpan::with_len(image.end, suffix);
        let history = TokenSpan::with_len(instr_suffix.end, history);
        Self {
            bos,
            instr_prefix,
            image,
            instr_suffix,
            history,
        }
    }

    pub fn len(&self) -> usize {
        self.history.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(bos, m, n_V, n_I - m, n_H)`.
    pub fn lengths(&self) -> (usize, usize, usize, usize, usize) {
        (
            self.bos.len(),
            self.instr_prefix.len(),
            self.image.len(),
            self.instr_suffix.len(),
            self.history.len(),
        )
    }

    /// All five spans with their content class, in sequence order.
    pub fn labelled_spans(&self) -> [(Category, TokenSpan); 5] {
        [
            (Category::Bos, self.bos),
            (Category::Instruction, self.instr_prefix),
            (Category::Image, self.image),
            (Category::Instruction, self.instr_suffix),
            (Category::History, self.history),
        ]
    }

    /// Checks that the spans are contiguous, ordered, and start at 0.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for (cat, s) in self.labelled_spans() {
            if s.start != cursor || s.end < s.start {
                return Err(Error::InvalidArgument(format!(
                    "{} span {}..{} does not continue at {cursor}",
                    cat.as_str(),
                    s.start,
                    s.end
                )));
            }
            cursor = s.end;
        }
        if self.bos.len() != 1 {
            return Err(Error::InvalidArgument("BOS span must hold one token".to_string()));
        }
        Ok(())
    }
}

/// Post-encoder image features awaiting projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDescriptor {
    pub features: Vec<Vec<f32>>,
}

impl ImageDescriptor {
    pub fn new(features: Vec<Vec<f32>>) -> Result<Self> {
        let d = Self { features };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let width = match self.features.first() {
            Some(f) => f.len(),
            None => return Err(Error::Empty("image features")),
        };
        for (i, f) in self.features.iter().enumerate() {
            if f.len() != width {
                return Err(Error::Shape(format!(
                    "image feature {i} has width {}, expected {width}",
                    f.len()
                )));
            }
            if let Some(j) = f.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: j, value: f[j] });
            }
        }
        Ok(())
    }
}

/// Projects image features to `n_v` visual token embeddings.
///
/// With `n_v` equal to the feature count each feature maps to one token.
/// With fewer tokens, features are mean-pooled over `n_v` contiguous chunks
/// (chunk `c` covers `[⌊c·N/n_v⌋, ⌊(c+1)·N/n_v⌋)`) before the linear map.
/// The projector has no bias.
pub fn project_image(img: &ImageDescriptor, n_v: usize, model: &Model) -> Result<Vec<Vec<f32>>> {
    img.validate()?;
    let cfg = model.config();
    let n = img.features.len();
    let width = img.features[0].len();
    if width != cfg.feature_width() {
        return Err(Error::Shape(format!(
            "image features are {width} wide, projector expects {}",
            cfg.feature_width()
        )));
    }
    if n_v == 0 {
        return Err(Error::InvalidArgument("n_v must be at least 1".to_string()));
    }
    if n_v > cfg.max_seq {
        return Err(Error::ContextOverflow {
            len: n_v,
            max: cfg.max_seq,
        });
    }
    if n_v > n {
        return Err(Error::InvalidArgument(format!(
            "cannot produce {n_v} visual tokens from {n} features"
        )));
    }
    let d = cfg.d_model;
    let out = (0..n_v)
        .map(|c| {
            let lo = c * n / n_v;
            let hi = (c + 1) * n / n_v;
            let pooled: Vec<f32> = if hi - lo == 1 {
                img.features[lo].clone()
            } else {
                let inv = 1.0 / (hi - lo) as f32;
                (0..width)
                    .map(|k| img.features[lo..hi].iter().map(|f| f[k]).sum::<f32>() * inv)
                    .collect()
            };
            let mut e = vec![0.0f32; d];
            for (k, &x) in pooled.iter().enumerate() {
                let row = &model.projector[k * d..(k + 1) * d];
                for (o, &w) in e.iter_mut().zip(row) {
                    *o += x * w;
                }
            }
            e
        })
        .collect();
    Ok(out)
}

/// A prompt before embedding: instruction tokens with the image spliced
/// after the first `image_at` of them, followed by generated history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub instruction: Vec<TokenId>,
    pub image_at: usize,
    #[serde(default)]
    pub image: Vec<Vec<f32>>,
    #[serde(default)]
    pub history: Vec<TokenId>,
}

impl Prompt {
    pub fn new(instruction: Vec<TokenId>, image_at: usize, image: Vec<Vec<f32>>) -> Self {
        Self {
            instruction,
            image_at,
            image,
            history: Vec::new(),
        }
    }

    /// Text-only prompt (no image, no history).
    pub fn text(instruction: Vec<TokenId>) -> Self {
        Self::new(instruction, 0, Vec::new())
    }

    pub fn layout(&self) -> PromptLayout {
        let m = self.image_at.min(self.instruction.len());
        PromptLayout::from_lengths(
            m,
            self.image.len(),
            self.instruction.len() - m,
            self.history.len(),
        )
    }

    pub fn len(&self) -> usize {
        1 + self.instruction.len() + self.image.len() + self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Same prompt with the image removed; instruction and history kept.
    pub fn without_image(&self) -> Self {
        Self {
            instruction: self.instruction.clone(),
            image_at: self.image_at,
            image: Vec::new(),
            history: self.history.clone(),
        }
    }
}

/// Embeds and concatenates BOS, `instruction[..m]`, image, `instruction[m..]`
/// and history.
pub fn assemble_prompt(
    model: &Model,
    instruction: &[TokenId],
    image: &[Vec<f32>],
    history: &[TokenId],
    m: usize,
) -> Result<(Vec<Vec<f32>>, PromptLayout)> {
    if m > instruction.len() {
        return Err(Error::InvalidArgument(format!(
            "image position {m} is past the {}-token instruction",
            instruction.len()
        )));
    }
    let cfg = model.config();
    let total = 1 + instruction.len() + image.len() + history.len();
    if total > cfg.max_seq {
        return Err(Error::ContextOverflow {
            len: total,
            max: cfg.max_seq,
        });
    }
    let mut seq = Vec::with_capacity(total);
    seq.push(model.embed_token(BOS_ID)?.to_vec());
    for &t in &instruction[..m] {
        seq.push(model.embed_token(t)?.to_vec());
    }
    for (i, e) in image.iter().enumerate() {
        if e.len() != cfg.d_model {
            return Err(Error::Shape(format!(
                "image embedding {i} is {} wide, model width is {}",
                e.len(),
                cfg.d_model
            )));
        }
        seq.push(e.clone());
    }
    for &t in instruction[m..].iter().chain(history) {
        seq.push(model.embed_token(t)?.to_vec());
    }
    let layout = PromptLayout::from_lengths(m, image.len(), instruction.len() - m, history.len());
    Ok((seq, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::build(ModelConfig::fixture()).unwrap()
    }

    #[test]
    fn canonical_layout_lengths() {
        let m = model();
        let instr: Vec<TokenId> = (2..23).collect();
        let image = vec![vec![0.0; 32]; 576];
        let (seq, layout) = assemble_prompt(&m, &instr, &image, &[], 21).unwrap();
        assert_eq!(layout.lengths(), (1, 21, 576, 0, 0));
        assert_eq!(seq.len(), 598);
        layout.validate().unwrap();
    }

    #[test]
    fn image_right_after_bos_when_m_is_zero() {
        let m = model();
        let image = vec![vec![0.5; 32]; 3];
        let (seq, layout) = assemble_prompt(&m, &[5, 6], &image, &[7], 0).unwrap();
        assert_eq!(layout.image, TokenSpan::with_len(1, 3));
        assert_eq!(seq[1], image[0]);
        assert_eq!(layout.history, TokenSpan::with_len(6, 1));
    }

    #[test]
    fn empty_image_gives_empty_span() {
        let m = model();
        let (_, layout) = assemble_prompt(&m, &[5, 6], &[], &[], 1).unwrap();
        assert!(layout.image.is_empty());
        assert_eq!(layout.lengths(), (1, 1, 0, 1, 0));
    }

    #[test]
    fn overflow_and_bad_m_rejected() {
        let m = model();
        let long: Vec<TokenId> = vec![3; 1024];
        assert!(matches!(
            assemble_prompt(&m, &long, &[], &[], 0),
            Err(Error::ContextOverflow { .. })
        ));
        assert!(assemble_prompt(&m, &[3], &[], &[], 2).is_err());
        assert!(matches!(
            assemble_prompt(&m, &[99], &[], &[], 0),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn projector_one_to_one_and_pooled() {
        let m = model();
        let feats: Vec<Vec<f32>> = (0..8).map(|i| vec![i as f32 * 0.1; 32]).collect();
        let img = ImageDescriptor::new(feats.clone()).unwrap();
        let four = project_image(&ImageDescriptor::new(feats[..4].to_vec()).unwrap(), 4, &m).unwrap();
        assert_eq!(four.len(), 4);
        let single = project_image(&ImageDescriptor::new(vec![feats[2].clone()]).unwrap(), 1, &m).unwrap();
        assert_eq!(four[2], single[0]);

        let two = project_image(&img, 2, &m).unwrap();
        assert_eq!(two.len(), 2);
        // First half mean is 0.15 everywhere.
        let mean = ImageDescriptor::new(vec![vec![(0.0 + 0.1 + 0.2 + 0.3) / 4.0; 32]]).unwrap();
        let expect = project_image(&mean, 1, &m).unwrap();
        for (a, b) in two[0].iter().zip(&expect[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_features_project_to_zero() {
        let m = model();
        let img = ImageDescriptor::new(vec![vec![0.0; 32]; 3]).unwrap();
        let out = project_image(&img, 3, &m).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn projector_rejects_bad_counts() {
        let m = model();
        let img = ImageDescriptor::new(vec![vec![0.0; 32]; 3]).unwrap();
        assert!(project_image(&img, 0, &m).is_err());
        assert!(project_image(&img, 4, &m).is_err());
        assert!(matches!(project_image(&img, 5000, &m), Err(Error::ContextOverflow { .. })));
        assert!(ImageDescriptor::new(vec![]).is_err());
    }
}
