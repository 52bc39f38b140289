//! Causal multi-head attention primitives.
//!
//! Everything here works on plain row-major `f32` buffers. Rows of the
//! attention matrix are exposed as [`AttentionRow`]s carrying both the
//! pre-softmax scores and, once normalised, the post-softmax weights, so
//! that callers can trace and edit them.
//!
//! Exponentials go through `libm` so results do not depend on the host C
//! library, and softmax normalisers use compensated summation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Half-open token index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::InvalidArgument(format!(
                "span start {start} is after end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    /// Span of `len` tokens starting at `start`.
    pub fn with_len(start: usize, len: usize) -> Self {
        Self {
            start,
            end: start + len,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index < self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    /// Fails unless the span lies within a sequence of `len` tokens.
    pub fn check_within(&self, len: usize) -> Result<()> {
        if self.start > self.end || self.end > len {
            return Err(Error::SpanOutOfBounds {
                start: self.start,
                end: self.end,
                len,
            });
        }
        Ok(())
    }
}

/// One query row of an attention matrix.
///
/// `logits` are the scaled, masked scores before softmax (masked entries
/// are `-inf`). `probs`, when present, is the softmax of `logits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub logits: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f32>>,
}

impl AttentionRow {
    /// Row with pre-softmax values only.
    pub fn from_logits(logits: Vec<f32>) -> Self {
        Self {
            logits,
            probs: None,
        }
    }

    /// Recomputes `probs` from the current logits.
    pub fn normalized(mut self) -> Result<Self> {
        self.probs = Some(masked_softmax(&self.logits)?);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Numerically stable softmax over finite logits.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    check_finite(logits)?;
    Ok(softmax_unchecked(logits))
}

/// Softmax that treats `-inf` entries as masked (probability exactly 0).
///
/// At least one entry must be finite; `NaN` and `+inf` are rejected.
pub fn masked_softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    let mut any_finite = false;
    for (index, &value) in logits.iter().enumerate() {
        if value.is_nan() || value == f32::INFINITY {
            return Err(Error::NonFinite { index, value });
        }
        any_finite |= value.is_finite();
    }
    if !any_finite {
        return Err(Error::InvalidArgument(
            "every softmax entry is masked".to_string(),
        ));
    }
    Ok(softmax_unchecked(logits))
}

fn softmax_unchecked(logits: &[f32]) -> Vec<f32> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f32::NEG_INFINITY, f32::max);
    let mut out: Vec<f32> = logits
        .iter()
        .map(|&v| {
            if v == f32::NEG_INFINITY {
                0.0
            } else {
                libm::expf(v - max)
            }
        })
        .collect();
    let total = kahan_sum(&out);
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Compensated `f32` summation.
pub(crate) fn kahan_sum(values: &[f32]) -> f32 {
    let mut sum = 0.0f32;
    let mut carry = 0.0f32;
    for &v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Result of a single attention head over a whole sequence.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub output: Matrix,
    pub rows: Vec<AttentionRow>,
}

/// In-place edit of one query's masked pre-softmax row.
pub type RowEdit<'a> = dyn Fn(usize, &mut [f32]) + 'a;

/// Scaled dot-product attention for one head: `softmax(Q Kᵀ / √d_k) V`.
///
/// With `causal`, query `i` sees keys up to `i + (K.rows - Q.rows)`; later
/// keys are set to `-inf`. The optional `edit` hook receives each query
/// index and its masked pre-softmax row, and may modify it in place.
pub fn attention_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal: bool,
    edit: Option<&RowEdit>,
) -> Result<HeadOutput> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "query width {} differs from key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    if k.rows() == 0 {
        return Err(Error::Empty("attention keys"));
    }
    if causal && q.rows() > k.rows() {
        return Err(Error::Shape(format!(
            "causal attention with {} queries over {} keys",
            q.rows(),
            k.rows()
        )));
    }
    let offset = k.rows() - q.rows().min(k.rows());
    let scale = 1.0 / (q.cols() as f32).sqrt();
    let mut out = vec![0.0f32; q.rows() * v.cols()];
    let mut rows = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        let visible = if causal { i + offset + 1 } else { k.rows() };
        let mut logits = score_row(q.row(i), k.data(), k.rows(), k.cols(), visible, scale);
        if let Some(edit) = edit {
            edit(i, &mut logits);
        }
        let probs = masked_softmax(&logits)?;
        mix_values(
            &probs,
            v.data(),
            v.cols(),
            &mut out[i * v.cols()..(i + 1) * v.cols()],
        );
        rows.push(AttentionRow {
            logits,
            probs: Some(probs),
        });
    }
    Ok(HeadOutput {
        output: Matrix::new(q.rows(), v.cols(), out)?,
        rows,
    })
}

/// Scaled scores of one query against `n_keys` keys stored row-major with
/// stride `width`; keys at or beyond `visible` are masked.
pub(crate) fn score_row(
    query: &[f32],
    keys: &[f32],
    n_keys: usize,
    width: usize,
    visible: usize,
    scale: f32,
) -> Vec<f32> {
    (0..n_keys)
        .map(|j| {
            if j < visible {
                let key = &keys[j * width..j * width + query.len()];
                dot(query, key) * scale
            } else {
                f32::NEG_INFINITY
            }
        })
        .collect()
}

/// `out = Σ_j probs[j] · values[j]`, accumulated in key order.
pub(crate) fn mix_values(probs: &[f32], values: &[f32], width: usize, out: &mut [f32]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let row = &values[j * width..j * width + out.len()];
        for (o, &x) in out.iter_mut().zip(row) {
            *o += p * x;
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

/// Adds `alpha · |x|` to every finite pre-softmax score inside `span`.
///
/// Masked (`-inf`) entries are left as they are. The returned row has no
/// probabilities; call [`AttentionRow::normalized`] to recompute them.
pub fn amplify_span(row: &AttentionRow, span: TokenSpan, alpha: f32) -> Result<AttentionRow> {
    let mut logits = row.logits.clone();
    amplify_logits(&mut logits, span, alpha)?;
    Ok(AttentionRow::from_logits(logits))
}

/// In-place form of [`amplify_span`] on a bare score slice.
pub fn amplify_logits(logits: &mut [f32], span: TokenSpan, alpha: f32) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "amplification step must be finite and non-negative, got {alpha}"
        )));
    }
    span.check_within(logits.len())?;
    if alpha == 0.0 {
        return Ok(());
    }
    let step = f64::from(alpha);
    for x in &mut logits[span.range()] {
        if x.is_finite() {
            let v = f64::from(*x);
            *x = (v + step * v.abs()) as f32;
        }
    }
    Ok(())
}

/// Sums post-softmax probability over labelled spans.
///
/// The spans must be pairwise disjoint and together cover the whole row.
/// Masses are accumulated in `f64`.
pub fn span_mass<L: Clone>(row: &AttentionRow, spans: &[(L, TokenSpan)]) -> Result<Vec<(L, f64)>> {
    let probs = row
        .probs
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("row has no probabilities".to_string()))?;
    let len = probs.len();
    let mut order: Vec<TokenSpan> = spans.iter().map(|(_, s)| *s).collect();
    for s in &order {
        s.check_within(len)?;
    }
    order.sort();
    let mut cursor = 0;
    for s in &order {
        if s.start != cursor {
            return Err(Error::InvalidArgument(format!(
                "spans must partition 0..{len}: gap or overlap at {cursor}"
            )));
        }
        cursor = s.end;
    }
    if cursor != len {
        return Err(Error::InvalidArgument(format!(
            "spans cover 0..{cursor} but the row has {len} entries"
        )));
    }
    Ok(spans
        .iter()
        .map(|(label, s)| {
            let mass = probs[s.range()].iter().map(|&p| f64::from(p)).sum();
            (label.clone(), mass)
        })
        .collect())
}
