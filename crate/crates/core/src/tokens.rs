//! Cross-modal token weighting.
//!
//! Each generated token gets a prompt alignment `a_t` and a visual alignment
//! `v_t` (means of its relevance row over the prompt / visual columns), a
//! generation confidence `p_t`, and per-modality weights
//! `beta_t = p_t * w_t / sum_k p_k * w_k` where the visual map uses `a_t` and
//! the prompt map uses `v_t`. The joint relevance is the geometric mean of
//! the two betas. Function-word relevance flow adjusts a *separate* copy of
//! the betas for display; aggregation always uses the unflowed weights.

use serde::Serialize;

use crate::config::TokenConfig;
use crate::error::{Error, Result};
use crate::relevance::RelevanceMatrix;
use crate::trace::{TraceBundle, TraceDims};

fn row_mean(r: &RelevanceMatrix, cols: std::ops::Range<usize>) -> f64 {
    let len = cols.len();
    if len == 0 {
        return 0.0;
    }
    r.target_row(cols).iter().sum::<f64>() / len as f64
}

/// Mean relevance of the target token's row over the prompt columns.
pub fn prompt_alignment(r: &RelevanceMatrix, dims: &TraceDims) -> f64 {
    row_mean(r, dims.prompt_range())
}

/// Mean relevance of the target token's row over the visual columns.
pub fn visual_alignment(r: &RelevanceMatrix, dims: &TraceDims) -> f64 {
    row_mean(r, dims.visual_range())
}

/// Normalized weights plus whether the uniform fallback was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights {
    pub weights: Vec<f64>,
    pub fallback: bool,
}

/// `p_t * w_t / sum_k p_k * w_k`; uniform (with `fallback`) when every product is zero.
pub fn combined_weights(alignment: &[f64], confidence: &[f64]) -> Result<SimplexWeights> {
    if alignment.len() != confidence.len() || alignment.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} alignments vs {} confidences",
            alignment.len(),
            confidence.len()
        )));
    }
    let products: Vec<f64> = alignment.iter().zip(confidence).map(|(w, p)| w * p).collect();
    Ok(normalize_products(products))
}

fn normalize_products(products: Vec<f64>) -> SimplexWeights {
    let total: f64 = products.iter().sum();
    if total > 0.0 && total.is_finite() {
        SimplexWeights {
            weights: products.into_iter().map(|v| v / total).collect(),
            fallback: false,
        }
    } else {
        log::warn!("degenerate token weights (all products zero); using uniform weights");
        let n = products.len();
        SimplexWeights {
            weights: vec![1.0 / n as f64; n],
            fallback: true,
        }
    }
}

/// Elementwise geometric mean of the two modality weights.
pub fn joint_relevance(beta_visual: &[f64], beta_prompt: &[f64]) -> Vec<f64> {
    beta_visual
        .iter()
        .zip(beta_prompt)
        .map(|(v, p)| (v * p).sqrt())
        .collect()
}

/// `influence[j][i]`: relevance of generated token `i` for generating token
/// `j`, read from token `j`'s own relevance matrix.
pub fn token_influence(relevances: &[RelevanceMatrix]) -> Vec<Vec<f64>> {
    relevances
        .iter()
        .map(|rj| {
            relevances
                .iter()
                .map(|ri| rj.matrix[[rj.target_pos, ri.target_pos]])
                .collect()
        })
        .collect()
}

/// Normalized influence `F[i][j] = R(j,i) / sum_{k>i} R(k,i)` for `j > i`.
/// Rows of non-donors, and donors with no downstream relevance, are zero.
pub fn flow_matrix(influence: &[Vec<f64>], donors: &[bool]) -> Vec<Vec<f64>> {
    let t = influence.len();
    let mut f = vec![vec![0.0; t]; t];
    for i in 0..t {
        if !donors.get(i).copied().unwrap_or(false) {
            continue;
        }
        let denom: f64 = (i + 1..t).map(|k| influence[k][i]).sum();
        if denom > 0.0 {
            for j in i + 1..t {
                f[i][j] = influence[j][i] / denom;
            }
        }
    }
    f
}

/// `beta'_t = beta_t + strength * sum_{i<t} beta_i * F[i][t]`, L1-normalized.
/// A zero strength returns `beta` unchanged.
pub fn flow_redistribute(influence: &[Vec<f64>], beta: &[f64], strength: f64, donors: &[bool]) -> Vec<f64> {
    if strength == 0.0 {
        return beta.to_vec();
    }
    let f = flow_matrix(influence, donors);
    let mut out: Vec<f64> = beta.to_vec();
    for (t, slot) in out.iter_mut().enumerate() {
        let received: f64 = (0..t).map(|i| beta[i] * f[i][t]).sum();
        *slot += strength * received;
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn is_punctuation(token: &str) -> bool {
    let t = token.trim();
    !t.is_empty() && t.chars().all(|c| c.is_ascii_punctuation())
}

/// Per-token weights for one trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenWeightTable {
    pub prompt_alignment: Vec<f64>,
    pub visual_alignment: Vec<f64>,
    pub confidence: Vec<f64>,
    /// Aggregation weights for the visual map.
    pub beta_visual: Vec<f64>,
    /// Aggregation weights for the prompt map.
    pub beta_prompt: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta_visual_flowed: Option<Vec<f64>>,
    pub beta_prompt_flowed: Option<Vec<f64>>,
    pub gamma_flowed: Option<Vec<f64>>,
    pub flow_applied: bool,
    pub flow_strength: f64,
    pub degenerate: bool,
}

pub fn build_token_table(
    bundle: &TraceBundle,
    relevances: &[RelevanceMatrix],
    config: &TokenConfig,
) -> Result<TokenWeightTable> {
    config.validate()?;
    let d = bundle.dims;
    if relevances.len() != d.generated {
        return Err(Error::ShapeMismatch(format!(
            "{} relevance matrices for T={}",
            relevances.len(),
            d.generated
        )));
    }
    let a: Vec<f64> = relevances.iter().map(|r| prompt_alignment(r, &d)).collect();
    let v: Vec<f64> = relevances.iter().map(|r| visual_alignment(r, &d)).collect();
    let p = bundle.confidences.clone();

    let ones = vec![1.0; d.generated];
    let conf = if config.use_token_confidence { &p } else { &ones };
    let align_visual = if config.use_prompt_weighting { &a } else { &ones };

    let keep: Vec<f64> = bundle
        .generated_texts()
        .iter()
        .map(|t| {
            if config.drop_punctuation && is_punctuation(t) {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    let weigh = |align: &[f64]| -> SimplexWeights {
        let products = align
            .iter()
            .zip(conf)
            .zip(&keep)
            .map(|((w, p), k)| w * p * k)
            .collect();
        normalize_products(products)
    };
    let bv = weigh(align_visual);
    let bp = weigh(&v);
    let gamma = joint_relevance(&bv.weights, &bp.weights);

    let (bvf, bpf, gf) = if config.apply_flow {
        let influence = token_influence(relevances);
        let donors = if config.flow_all_pairs {
            vec![true; d.generated]
        } else {
            bundle.function_word_mask.clone()
        };
        let fv = flow_redistribute(&influence, &bv.weights, config.flow_strength, &donors);
        let fp = flow_redistribute(&influence, &bp.weights, config.flow_strength, &donors);
        let g = joint_relevance(&fv, &fp);
        (Some(fv), Some(fp), Some(g))
    } else {
        (None, None, None)
    };

    Ok(TokenWeightTable {
        prompt_alignment: a,
        visual_alignment: v,
        confidence: p,
        beta_visual: bv.weights,
        beta_prompt: bp.weights,
        gamma,
        flow_applied: config.apply_flow,
        beta_visual_flowed: bvf,
        beta_prompt_flowed: bpf,
        gamma_flowed: gf,
        flow_strength: config.flow_strength,
        degenerate: bv.fallback || bp.fallback,
    })
}
