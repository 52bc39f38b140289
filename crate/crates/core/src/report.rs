//! Attention-ratio reporting over generation traces.
//!
//! For every generated token the last-row attention of each head is split
//! into BOS, instruction, image, and history mass. The report averages
//! those over layers and heads per step, and keeps the per-layer,
//! per-head BOS mass as a heat-map grid.

use serde::{Deserialize, Serialize};

use crate::attention::{span_mass, AttentionRow};
use crate::decoding::StepTrace;
use crate::error::Result;
use crate::model::{Category, PromptLayout};

/// Attention mass on each content class of one attention row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMass {
    pub bos: f64,
    pub instruction: f64,
    pub image: f64,
    pub history: f64,
}

impl CategoryMass {
    pub fn from_row(row: &AttentionRow, layout: &PromptLayout) -> Result<Self> {
        let mut out = CategoryMass::default();
        for (cat, mass) in span_mass(row, &layout.labelled_spans())? {
            *out.get_mut(cat) += mass;
        }
        Ok(out)
    }

    pub fn get(&self, cat: Category) -> f64 {
        match cat {
            Category::Bos => self.bos,
            Category::Instruction => self.instruction,
            Category::Image => self.image,
            Category::History => self.history,
        }
    }

    fn get_mut(&mut self, cat: Category) -> &mut f64 {
        match cat {
            Category::Bos => &mut self.bos,
            Category::Instruction => &mut self.instruction,
            Category::Image => &mut self.image,
            Category::History => &mut self.history,
        }
    }

    pub fn total(&self) -> f64 {
        self.bos + self.instruction + self.image + self.history
    }

    fn mean(items: impl Iterator<Item = CategoryMass>) -> CategoryMass {
        let mut acc = CategoryMass::default();
        let mut n = 0usize;
        for m in items {
            for c in Category::ALL {
                *acc.get_mut(c) += m.get(c);
            }
            n += 1;
        }
        if n > 0 {
            for c in Category::ALL {
                *acc.get_mut(c) /= n as f64;
            }
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRatio {
    pub step: usize,
    pub token: crate::TokenId,
    #[serde(flatten)]
    pub mass: CategoryMass,
}

/// One CSV-ready row: the category masses of a single head at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRatio {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub bos: f64,
    pub instruction: f64,
    pub image: f64,
    pub history: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRatioReport {
    pub schema_version: String,
    /// Layer- and head-averaged masses per generated token.
    pub steps: Vec<StepRatio>,
    /// `[layer][head]` BOS mass averaged over steps.
    pub bos_grid: Vec<Vec<f64>>,
}

impl AttentionRatioReport {
    pub fn from_steps(steps: &[StepTrace]) -> Self {
        let step_rows = steps
            .iter()
            .map(|s| StepRatio {
                step: s.step,
                token: s.token,
                mass: CategoryMass::mean(s.masses.iter().flatten().copied()),
            })
            .collect();
        let n_layers = steps.first().map_or(0, |s| s.masses.len());
        let bos_grid = (0..n_layers)
            .map(|l| {
                let n_heads = steps[0].masses[l].len();
                (0..n_heads)
                    .map(|h| {
                        let vals: Vec<f64> = steps
                            .iter()
                            .filter_map(|s| s.masses.get(l).and_then(|m| m.get(h)))
                            .map(|m| m.bos)
                            .collect();
                        vals.iter().sum::<f64>() / vals.len().max(1) as f64
                    })
                    .collect()
            })
            .collect();
        Self {
            schema_version: crate::SCHEMA_VERSION.to_string(),
            steps: step_rows,
            bos_grid,
        }
    }

    /// Per-step, per-layer, per-head rows for plotting.
    pub fn head_rows(steps: &[StepTrace]) -> Vec<HeadRatio> {
        let mut rows = Vec::new();
        for s in steps {
            for (layer, heads) in s.masses.iter().enumerate() {
                for (head, m) in heads.iter().enumerate() {
                    rows.push(HeadRatio {
                        step: s.step,
                        layer,
                        head,
                        bos: m.bos,
                        instruction: m.instruction,
                        image: m.image,
                        history: m.history,
                    });
                }
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::LogitVector;

    #[test]
    fn category_mass_folds_instruction_halves() {
        let layout = PromptLayout::from_lengths(1, 1, 1, 1);
        let row = AttentionRow {
            logits: vec![0.0; 5],
            probs: Some(vec![0.1, 0.2, 0.3, 0.15, 0.25]),
        };
        let m = CategoryMass::from_row(&row, &layout).unwrap();
        assert!((m.bos - 0.1).abs() < 1e-7);
        assert!((m.instruction - 0.35).abs() < 1e-7);
        assert!((m.image - 0.3).abs() < 1e-7);
        assert!((m.history - 0.25).abs() < 1e-7);
    }

    #[test]
    fn report_averages_heads_and_layers() {
        let a = CategoryMass {
            bos: 1.0,
            ..Default::default()
        };
        let b = CategoryMass {
            image: 1.0,
            ..Default::default()
        };
        let step = StepTrace {
            step: 0,
            token: 5,
            cond_logits: LogitVector::new(vec![0.0]).unwrap(),
            text_logits: None,
            image_mass: vec![0.5],
            masses: vec![vec![a, b]],
        };
        let r = AttentionRatioReport::from_steps(std::slice::from_ref(&step));
        assert_eq!(r.steps[0].mass.bos, 0.5);
        assert_eq!(r.steps[0].mass.image, 0.5);
        assert_eq!(r.bos_grid, vec![vec![1.0, 0.0]]);
        assert_eq!(AttentionRatioReport::head_rows(&[step]).len(), 2);
    }
}
