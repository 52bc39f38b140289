use serde::{Deserialize, Serialize};

use super::{assemble_prompt, Model, Prompt, PromptLayout};
use crate::attention::{self, AttentionRow};
use crate::decoding::LogitVector;
use crate::error::{Error, Result};

const RMS_EPS: f32 = 1e-5;

/// Edits the last query row of each attention head before softmax.
pub trait AttentionHook: Sync {
    fn edit_last_row(&self, layer: usize, head: usize, layout: &PromptLayout, logits: &mut [f32]);
}

/// Hook that leaves every row untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHook;

impl AttentionHook for NoHook {
    fn edit_last_row(&self, _: usize, _: usize, _: &PromptLayout, _: &mut [f32]) {}
}

/// What a single forward pass exposes about the last position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub logits: LogitVector,
    /// `[layer][head]` last-row attention with pre- and post-softmax values.
    pub attention: Vec<Vec<AttentionRow>>,
    /// Residual stream of the last position after each layer.
    pub hidden: Vec<Vec<f32>>,
    pub layout: PromptLayout,
}

/// Every attention row and hidden state of a forward pass.
#[derive(Debug, Clone)]
pub struct FullTrace {
    /// `[layer][head][query]`.
    pub rows: Vec<Vec<Vec<AttentionRow>>>,
    /// `[layer][position]`.
    pub hidden: Vec<Vec<Vec<f32>>>,
}

/// Anything that can score a prompt: the toy transformer, or a hand-built
/// fixture model.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;
    fn max_seq(&self) -> usize;
    fn n_layers(&self) -> usize;
    fn run(&self, prompt: &Prompt, hook: Option<&dyn AttentionHook>) -> Result<ForwardTrace>;
}

impl LanguageModel for Model {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_seq(&self) -> usize {
        self.config().max_seq
    }

    fn n_layers(&self) -> usize {
        self.config().n_layers
    }

    fn run(&self, prompt: &Prompt, hook: Option<&dyn AttentionHook>) -> Result<ForwardTrace> {
        let (seq, layout) = assemble_prompt(
            self,
            &prompt.instruction,
            &prompt.image,
            &prompt.history,
            prompt.image_at.min(prompt.instruction.len()),
        )?;
        forward(self, &seq, &layout, hook)
    }
}

/// Runs the decoder over an embedded sequence and traces the last position.
///
/// The hook, when given, sees the masked pre-softmax last row of every head
/// in every layer.
pub fn forward(
    model: &Model,
    sequence: &[Vec<f32>],
    layout: &PromptLayout,
    hook: Option<&dyn AttentionHook>,
) -> Result<ForwardTrace> {
    Ok(run_layers(model, sequence, layout, hook, false)?.0)
}

impl Model {
    /// Like [`forward`], also returning every row and position.
    pub fn forward_full(
        &self,
        sequence: &[Vec<f32>],
        layout: &PromptLayout,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<(ForwardTrace, FullTrace)> {
        let (trace, full) = run_layers(self, sequence, layout, hook, true)?;
        Ok((trace, full.expect("capture requested")))
    }
}

fn run_layers(
    model: &Model,
    sequence: &[Vec<f32>],
    layout: &PromptLayout,
    hook: Option<&dyn AttentionHook>,
    capture: bool,
) -> Result<(ForwardTrace, Option<FullTrace>)> {
    let cfg = model.config();
    let n = sequence.len();
    let d = cfg.d_model;
    let dh = cfg.d_head;
    if n == 0 {
        return Err(Error::Empty("forward sequence"));
    }
    if n > cfg.max_seq {
        return Err(Error::ContextOverflow {
            len: n,
            max: cfg.max_seq,
        });
    }
    if layout.len() != n {
        return Err(Error::Shape(format!(
            "layout describes {} positions, sequence has {n}",
            layout.len()
        )));
    }

    let mut x = Vec::with_capacity(n * d);
    for (i, e) in sequence.iter().enumerate() {
        if e.len() != d {
            return Err(Error::Shape(format!("embedding {i} is {} wide, expected {d}", e.len())));
        }
        let pos = &model.position_embedding[i * d..(i + 1) * d];
        x.extend(e.iter().zip(pos).map(|(a, b)| a + b));
    }

    let scale = 1.0 / (dh as f32).sqrt();
    let mut last_attention = Vec::with_capacity(cfg.n_layers);
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    let mut full = capture.then(|| FullTrace {
        rows: Vec::new(),
        hidden: Vec::new(),
    });

    for (l, w) in model.layers.iter().enumerate() {
        let h = rms_norm_rows(&x, n, d, &w.attn_norm);
        let q = matmul(&h, n, d, &w.wq, d);
        let k = matmul(&h, n, d, &w.wk, d);
        let v = matmul(&h, n, d, &w.wv, d);

        let mut mixed = vec![0.0f32; n * d];
        let mut layer_rows = Vec::with_capacity(cfg.n_heads);
        let mut layer_full = Vec::new();
        let mut head_out = vec![0.0f32; dh];
        for head in 0..cfg.n_heads {
            let qh = head_columns(&q, n, d, head * dh, dh);
            let kh = head_columns(&k, n, d, head * dh, dh);
            let vh = head_columns(&v, n, d, head * dh, dh);
            let mut head_full = Vec::new();
            for i in 0..n {
                let mut logits = attention::score_row(&qh[i * dh..(i + 1) * dh], &kh, n, dh, i + 1, scale);
                if i == n - 1 {
                    if let Some(hook) = hook {
                        hook.edit_last_row(l, head, layout, &mut logits);
                    }
                }
                let probs = attention::masked_softmax(&logits)?;
                attention::mix_values(&probs, &vh, dh, &mut head_out);
                mixed[i * d + head * dh..i * d + (head + 1) * dh].copy_from_slice(&head_out);
                if capture || i == n - 1 {
                    let row = AttentionRow {
                        logits,
                        probs: Some(probs),
                    };
                    if capture {
                        head_full.push(row.clone());
                    }
                    if i == n - 1 {
                        layer_rows.push(row);
                    }
                }
            }
            layer_full.push(head_full);
        }
        let attn = matmul(&mixed, n, d, &w.wo, d);
        add_in_place(&mut x, &attn);

        let h2 = rms_norm_rows(&x, n, d, &w.mlp_norm);
        let mut up = matmul(&h2, n, d, &w.w_up, 4 * d);
        add_bias(&mut up, &w.b_up);
        for u in &mut up {
            *u = silu(*u);
        }
        let mut down = matmul(&up, n, 4 * d, &w.w_down, d);
        add_bias(&mut down, &w.b_down);
        add_in_place(&mut x, &down);

        hidden.push(x[(n - 1) * d..].to_vec());
        last_attention.push(layer_rows);
        if let Some(f) = full.as_mut() {
            f.rows.push(layer_full);
            f.hidden.push(x.chunks(d).map(<[f32]>::to_vec).collect());
        }
    }

    let last = rms_norm_rows(&x[(n - 1) * d..], 1, d, &model.final_norm);
    let logits = matmul(&last, 1, d, &model.lm_head, cfg.vocab_size);
    let trace = ForwardTrace {
        logits: LogitVector::new(logits)?,
        attention: last_attention,
        hidden,
        layout: *layout,
    };
    Ok((trace, full))
}

fn head_columns(m: &[f32], rows: usize, width: usize, start: usize, len: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&m[r * width + start..r * width + start + len]);
    }
    out
}

/// `a (rows × inner) · b (inner × cols)`, accumulating over `inner` in order.
fn matmul(a: &[f32], rows: usize, inner: usize, b: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let o = &mut out[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let x = a[r * inner + k];
            let brow = &b[k * cols..(k + 1) * cols];
            for (acc, &w) in o.iter_mut().zip(brow) {
                *acc += x * w;
            }
        }
    }
    out
}

fn rms_norm_rows(x: &[f32], rows: usize, width: usize, gain: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let ms = row.iter().fold(0.0f32, |acc, v| acc + v * v) / width as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| v * inv * g));
    }
    out
}

fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn add_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_mut(bias.len()) {
        add_in_place(row, bias);
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

/// Cosine similarity of consecutive last-position hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    /// `values[l]` compares layer `l` with layer `l + 1`.
    pub values: Vec<f32>,
    /// Set when some hidden state had zero norm; its similarities are 0.
    pub degenerate: bool,
}

pub fn layer_similarity(trace: &ForwardTrace) -> Result<LayerSimilarity> {
    if trace.hidden.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "layer similarity needs at least 2 layers, trace has {}",
            trace.hidden.len()
        )));
    }
    let mut degenerate = false;
    let values = trace
        .hidden
        .windows(2)
        .map(|pair| {
            let (a, b) = (&pair[0], &pair[1]);
            let na = attention::dot(a, a).sqrt();
            let nb = attention::dot(b, b).sqrt();
            if na == 0.0 || nb == 0.0 {
                degenerate = true;
                return 0.0;
            }
            (attention::dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
        })
        .collect();
    if degenerate {
        log::warn!("zero-norm hidden state; similarity reported as 0");
    }
    Ok(LayerSimilarity { values, degenerate })
}
