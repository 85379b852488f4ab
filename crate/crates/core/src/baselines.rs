//! Comparison explainers adapted to whole-response saliency.
//!
//! Each baseline builds one visual map per generated token and averages the
//! maps uniformly over the response; no confidence or alignment weighting.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::saliency::project_to_grid;
use crate::trace::TraceBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    RawAttention,
    Rollout,
    GradCamStyle,
    TmmeVanilla,
    TmmeLastK(usize),
}

impl BaselineKind {
    /// Directory name used under `baselines/`.
    pub fn dir_name(&self) -> String {
        match self {
            BaselineKind::RawAttention => "raw_attention".into(),
            BaselineKind::Rollout => "rollout".into(),
            BaselineKind::GradCamStyle => "grad_cam".into(),
            BaselineKind::TmmeVanilla => "tmme".into(),
            BaselineKind::TmmeLastK(k) => format!("tmme_last_{k}"),
        }
    }

    /// The five comparison explainers, with TMME truncated to `last_k` layers.
    pub fn all(last_k: usize) -> Vec<BaselineKind> {
        vec![
            BaselineKind::RawAttention,
            BaselineKind::Rollout,
            BaselineKind::GradCamStyle,
            BaselineKind::TmmeVanilla,
            BaselineKind::TmmeLastK(last_k),
        ]
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dir_name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    /// Accepts `raw`, `rollout`, `gradcam`, `tmme` and `tmme-last-<k>` (plus the directory names).
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "raw" | "raw_attention" => BaselineKind::RawAttention,
            "rollout" => BaselineKind::Rollout,
            "gradcam" | "grad_cam" => BaselineKind::GradCamStyle,
            "tmme" | "tmme_vanilla" => BaselineKind::TmmeVanilla,
            other => match other.strip_prefix("tmme_last_").map(str::parse::<usize>) {
                Some(Ok(k)) => BaselineKind::TmmeLastK(k),
                _ => return Err(Error::InvalidArgument(format!("unknown baseline kind {s:?}"))),
            },
        })
    }
}

pub fn baseline_map(bundle: &TraceBundle, kind: BaselineKind) -> Result<Grid> {
    match kind {
        BaselineKind::RawAttention => raw_attention_map(bundle),
        BaselineKind::Rollout => attention_rollout_map(bundle),
        BaselineKind::GradCamStyle => grad_cam_style_map(bundle),
        BaselineKind::TmmeVanilla => tmme_map(bundle, None),
        BaselineKind::TmmeLastK(k) => tmme_map(bundle, Some(k)),
    }
}

fn mean_heads(bundle: &TraceBundle, layer: usize) -> Array2<f64> {
    let h = bundle.dims.heads;
    let mut acc = bundle.attention(layer, 0);
    for head in 1..h {
        acc += &bundle.attention(layer, head);
    }
    acc / h as f64
}

/// Averages `per_token(t)` (each a K-vector) over generated tokens.
fn average_tokens(bundle: &TraceBundle, mut per_token: impl FnMut(usize) -> Vec<f64>) -> Result<Grid> {
    let d = bundle.dims;
    let mut acc = vec![0.0; d.visual];
    for t in 0..d.generated {
        for (a, v) in acc.iter_mut().zip(per_token(t)) {
            *a += v;
        }
    }
    let scale = 1.0 / d.generated as f64;
    acc.iter_mut().for_each(|v| *v *= scale);
    project_to_grid(&acc, bundle.patch_grid)
}

/// Attention averaged over layers and heads, restricted to visual columns.
pub fn raw_attention_map(bundle: &TraceBundle) -> Result<Grid> {
    let d = bundle.dims;
    let mut mean = Array2::<f64>::zeros((d.seq_len(), d.seq_len()));
    for l in 0..d.layers {
        mean += &mean_heads(bundle, l);
    }
    mean /= d.layers as f64;
    average_tokens(bundle, |t| {
        let q = d.generated_pos(t);
        d.visual_range().map(|j| mean[[q, j]]).collect()
    })
}

/// Rollout over all layers with the half-identity residual mix.
pub fn attention_rollout_map(bundle: &TraceBundle) -> Result<Grid> {
    let d = bundle.dims;
    let n = d.seq_len();
    let eye = Array2::<f64>::eye(n);
    let mut rollout = eye.clone();
    for l in 0..d.layers {
        let mut mixed = mean_heads(bundle, l) * 0.5 + &eye * 0.5;
        for mut row in mixed.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
        rollout = mixed.dot(&rollout);
    }
    average_tokens(bundle, |t| {
        let q = d.generated_pos(t);
        d.visual_range().map(|j| rollout[[q, j]]).collect()
    })
}

/// `ReLU(meanHeads(g_t * A))` at the final layer, row of token `t`.
pub fn grad_cam_style_map(bundle: &TraceBundle) -> Result<Grid> {
    let d = bundle.dims;
    let last = d.layers - 1;
    let attention: Vec<Array2<f64>> = (0..d.heads).map(|h| bundle.attention(last, h)).collect();
    average_tokens(bundle, |t| {
        let q = d.generated_pos(t);
        d.visual_range()
            .map(|j| {
                let mut s = 0.0;
                for (h, a) in attention.iter().enumerate() {
                    s += f64::from(bundle.gradient_view(t, last, h)[[q, j]]) * a[[q, j]];
                }
                (s / d.heads as f64).max(0.0)
            })
            .collect()
    })
}

/// TMME propagation: head-averaged positive gradient-weighted attention,
/// row-normalized, accumulated additively with uniform layer weights over
/// all layers (`last_k == None`) or the deepest `last_k`.
pub fn tmme_map(bundle: &TraceBundle, last_k: Option<usize>) -> Result<Grid> {
    let d = bundle.dims;
    let k = last_k.unwrap_or(d.layers);
    if k == 0 || k > d.layers {
        return Err(Error::InvalidK { k, layers: d.layers });
    }
    let n = d.seq_len();
    let attention: Vec<Vec<Array2<f64>>> = (d.layers - k..d.layers)
        .map(|l| (0..d.heads).map(|h| bundle.attention(l, h)).collect())
        .collect();
    let layer_weight = 1.0 / k as f64;
    average_tokens(bundle, |t| {
        let mut r = Array2::<f64>::eye(n);
        for (offset, heads) in attention.iter().enumerate() {
            let l = d.layers - k + offset;
            let mut e = Array2::<f64>::zeros((n, n));
            for (h, a) in heads.iter().enumerate() {
                let g = bundle.gradient_view(t, l, h);
                ndarray::Zip::from(&mut e)
                    .and(a)
                    .and(&g)
                    .for_each(|e, &a, &g| *e += (a * f64::from(g)).max(0.0));
            }
            e /= d.heads as f64;
            for mut row in e.rows_mut() {
                let s = row.sum();
                if s > 0.0 {
                    row /= s;
                }
            }
            let step = e.dot(&r);
            r.scaled_add(layer_weight, &step);
        }
        let q = d.generated_pos(t);
        d.visual_range().map(|j| r[[q, j]]).collect()
    })
}
