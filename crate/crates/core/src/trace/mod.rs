//! Trace bundles: one generation episode of a vision-language model.
//!
//! The unified causal sequence is laid out as `[visual | prompt | generated]`
//! with zero-based, contiguous index ranges. Attention is stored once for the
//! completed sequence; attention gradients are stored once per generated
//! token, since each is taken with respect to that token's logit.

mod io;
mod synth;

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

pub use io::{load_trace, save_trace, FORMAT_VERSION};
pub use synth::{
    is_function_word, load_synth_sidecar, synth_corpus, synth_human_map, synth_trace, SynthSpec,
    SYNTH_SIDECAR,
};

use crate::grid::PatchGrid;

/// Layer, head and sequence-segment sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct TraceDims {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "K")]
    pub visual: usize,
    #[serde(rename = "M")]
    pub prompt: usize,
    #[serde(rename = "T")]
    pub generated: usize,
}

impl TraceDims {
    pub fn new(layers: usize, heads: usize, visual: usize, prompt: usize, generated: usize) -> Self {
        Self {
            layers,
            heads,
            visual,
            prompt,
            generated,
        }
    }

    /// Total sequence length `N = K + M + T`.
    pub fn seq_len(&self) -> usize {
        self.visual + self.prompt + self.generated
    }

    pub fn visual_range(&self) -> Range<usize> {
        0..self.visual
    }

    pub fn prompt_range(&self) -> Range<usize> {
        self.visual..self.visual + self.prompt
    }

    pub fn generated_range(&self) -> Range<usize> {
        self.visual + self.prompt..self.seq_len()
    }

    /// Sequence position of the `t`-th generated token.
    pub fn generated_pos(&self, t: usize) -> usize {
        self.visual + self.prompt + t
    }

    /// Floats in one `[L][H][N][N]` tensor.
    pub fn tensor_len(&self) -> usize {
        let n = self.seq_len();
        self.layers * self.heads * n * n
    }

    pub fn is_valid(&self) -> bool {
        self.layers >= 1
            && self.heads >= 1
            && self.visual >= 1
            && self.prompt >= 1
            && self.generated >= 1
    }
}

/// One generation episode. Immutable once constructed or loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub id: String,
    pub dims: TraceDims,
    pub patch_grid: PatchGrid,
    /// `[L][H][N][N]`, row-major.
    pub attention: Vec<f32>,
    /// One `[L][H][N][N]` tensor per generated token.
    pub gradients: Vec<Vec<f32>>,
    pub token_texts: Vec<String>,
    pub confidences: Vec<f64>,
    pub function_word_mask: Vec<bool>,
    pub image_path: Option<String>,
}

impl TraceBundle {
    fn block(&self, layer: usize, head: usize) -> Range<usize> {
        let n = self.dims.seq_len();
        let start = (layer * self.dims.heads + head) * n * n;
        start..start + n * n
    }

    pub fn attention_view(&self, layer: usize, head: usize) -> ArrayView2<'_, f32> {
        let n = self.dims.seq_len();
        ArrayView2::from_shape((n, n), &self.attention[self.block(layer, head)])
            .expect("block has n*n entries")
    }

    pub fn gradient_view(&self, token: usize, layer: usize, head: usize) -> ArrayView2<'_, f32> {
        let n = self.dims.seq_len();
        ArrayView2::from_shape((n, n), &self.gradients[token][self.block(layer, head)])
            .expect("block has n*n entries")
    }

    /// Attention for `(layer, head)` widened to `f64`.
    pub fn attention(&self, layer: usize, head: usize) -> Array2<f64> {
        self.attention_view(layer, head).mapv(f64::from)
    }

    /// Gradient of generated token `token`'s logit for `(layer, head)`, widened to `f64`.
    pub fn gradient(&self, token: usize, layer: usize, head: usize) -> Array2<f64> {
        self.gradient_view(token, layer, head).mapv(f64::from)
    }

    pub fn generated_texts(&self) -> &[String] {
        &self.token_texts[self.dims.generated_range()]
    }

    pub fn prompt_texts(&self) -> &[String] {
        &self.token_texts[self.dims.prompt_range()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub code: &'static str,
    pub message: String,
    pub location: String,
}

/// Every invariant violation found in a bundle. `ok` iff `violations` is empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            ok: violations.is_empty(),
            violations,
        }
    }

    pub fn has(&self, code: &str) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

/// Default tolerance on attention row sums.
pub const DEFAULT_ROW_TOL: f64 = 1e-4;

// Caps the report size on badly broken traces.
const MAX_TENSOR_VIOLATIONS: usize = 64;

/// Checks every bundle invariant; `row_tol` bounds attention row-sum error.
pub fn validate_trace(t: &TraceBundle, row_tol: f64) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |code: &'static str, message: String, location: String| {
        out.push(Violation {
            code,
            message,
            location,
        })
    };
    let d = t.dims;
    if !d.is_valid() {
        push(
            "DIMS",
            format!("all of L, H, K, M, T must be >= 1, got {d:?}"),
            "dims".into(),
        );
        return ValidationReport::from_violations(out);
    }
    let n = d.seq_len();
    if t.patch_grid.cells() != d.visual {
        push(
            "GRID",
            format!(
                "patch grid {}x{} != K={}",
                t.patch_grid.rows, t.patch_grid.cols, d.visual
            ),
            "patch_grid".into(),
        );
    }
    if t.token_texts.len() != n {
        push(
            "TOKEN_COUNT",
            format!("{} token texts for N={n}", t.token_texts.len()),
            "token_texts".into(),
        );
    }
    if t.confidences.len() != d.generated {
        push(
            "CONF_COUNT",
            format!("{} confidences for T={}", t.confidences.len(), d.generated),
            "confidences".into(),
        );
    }
    for (i, &p) in t.confidences.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            push("CONF_RANGE", format!("confidence {p} outside [0,1]"), format!("confidences[{i}]"));
        }
    }
    if t.function_word_mask.len() != d.generated {
        push(
            "MASK_COUNT",
            format!("{} mask entries for T={}", t.function_word_mask.len(), d.generated),
            "function_word_mask".into(),
        );
    }
    let tensor_len = d.tensor_len();
    let attention_ok = t.attention.len() == tensor_len;
    if !attention_ok {
        push(
            "ATTN_SHAPE",
            format!("attention has {} floats, expected {tensor_len}", t.attention.len()),
            "attention".into(),
        );
    }
    if t.gradients.len() != d.generated {
        push(
            "GRAD_COUNT",
            format!("{} gradient tensors for T={}", t.gradients.len(), d.generated),
            "gradients".into(),
        );
    }
    for (k, g) in t.gradients.iter().enumerate() {
        if g.len() != tensor_len {
            push(
                "GRAD_SHAPE",
                format!("gradient tensor has {} floats, expected {tensor_len}", g.len()),
                format!("gradients[{k}]"),
            );
        } else if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            push(
                "GRAD_NONFINITE",
                "non-finite gradient".into(),
                format!("gradients[{k}] flat index {pos}"),
            );
        }
    }
    if attention_ok {
        let mut emitted = 0;
        'outer: for l in 0..d.layers {
            for h in 0..d.heads {
                let a = t.attention_view(l, h);
                for i in 0..n {
                    let mut sum = 0.0f64;
                    for j in 0..n {
                        let v = a[[i, j]];
                        let loc = || format!("(layer={l}, head={h}, row={i}, col={j})");
                        if !v.is_finite() {
                            push("ATTN_NONFINITE", "non-finite attention".into(), loc());
                            emitted += 1;
                        } else if j > i && v != 0.0 {
                            push("CAUSAL", format!("masked entry is {v}"), loc());
                            emitted += 1;
                        } else if v < 0.0 {
                            push("ATTN_NEGATIVE", format!("negative attention {v}"), loc());
                            emitted += 1;
                        }
                        sum += f64::from(v);
                    }
                    if (sum - 1.0).abs() > row_tol {
                        push(
                            "ROW_SUM",
                            format!("row sums to {sum}"),
                            format!("(layer={l}, head={h}, row={i})"),
                        );
                        emitted += 1;
                    }
                    if emitted >= MAX_TENSOR_VIOLATIONS {
                        break 'outer;
                    }
                }
            }
        }
    }
    ValidationReport::from_violations(out)
}
