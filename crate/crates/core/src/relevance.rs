//! Per-token relevance: gradient-weighted head fusion, adaptive layer
//! weighting, and additive propagation from an identity seed.
//!
//! All accumulation is done in `f64` even though traces store `f32`.

use std::ops::Range;

use ndarray::{Array2, ArrayView2, Zip};

use crate::config::{EngineConfig, UpdateRule};
use crate::error::{Error, Result};
use crate::trace::TraceBundle;

/// Numerically stable softmax of `scores / temperature`.
pub fn softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|&s| ((s - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `ReLU(g * A)` elementwise.
pub fn gradient_weighted_attention(
    attention: ArrayView2<'_, f64>,
    gradient: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if attention.shape() != gradient.shape() {
        return Err(Error::ShapeMismatch(format!(
            "attention {:?} vs gradient {:?}",
            attention.shape(),
            gradient.shape()
        )));
    }
    Ok(Zip::from(&attention)
        .and(&gradient)
        .map_collect(|&a, &g| (a * g).max(0.0)))
}

/// Expected attention under the head's positive-gradient distribution:
/// `sum(G) / sum(ReLU(g))`, or 0 when the head has no positive gradient.
pub fn head_ratio(weighted: ArrayView2<'_, f64>, gradient: ArrayView2<'_, f64>) -> f64 {
    let positive: f64 = gradient.iter().map(|&g| g.max(0.0)).sum();
    if positive > 0.0 {
        weighted.sum() / positive
    } else {
        0.0
    }
}

/// Softmax over heads of their positive-gradient attention ratios.
pub fn head_weights(weighted: &[Array2<f64>], gradients: &[Array2<f64>], temperature: f64) -> Vec<f64> {
    let ratios: Vec<f64> = weighted
        .iter()
        .zip(gradients)
        .map(|(w, g)| head_ratio(w.view(), g.view()))
        .collect();
    softmax(&ratios, temperature)
}

/// Divides every row with positive mass by its sum; zero rows stay zero.
pub fn row_normalize(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let sum = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        }
    }
}

/// Row-normalized head fusion for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFusion {
    pub fused: Array2<f64>,
    pub head_weights: Vec<f64>,
}

/// Fuses one layer's heads. With `head_weighting == false` heads are averaged.
pub fn fuse_layer(
    attention: &[Array2<f64>],
    gradients: &[Array2<f64>],
    temperature: f64,
    head_weighting: bool,
) -> Result<LayerFusion> {
    if attention.is_empty() || attention.len() != gradients.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} attention heads vs {} gradient heads",
            attention.len(),
            gradients.len()
        )));
    }
    let weighted = attention
        .iter()
        .zip(gradients)
        .map(|(a, g)| gradient_weighted_attention(a.view(), g.view()))
        .collect::<Result<Vec<_>>>()?;
    let weights = if head_weighting {
        head_weights(&weighted, gradients, temperature)
    } else {
        uniform(weighted.len())
    };
    let mut fused = Array2::zeros(weighted[0].raw_dim());
    for (w, g) in weights.iter().zip(&weighted) {
        if g.raw_dim() != fused.raw_dim() {
            return Err(Error::ShapeMismatch("heads differ in shape".into()));
        }
        fused.scaled_add(*w, g);
    }
    row_normalize(&mut fused);
    Ok(LayerFusion {
        fused,
        head_weights: weights,
    })
}

/// `|| sum_h g[l][h] ||_1` per layer, normalized across layers (uniform if all zero).
pub fn layer_gradient_norms(bundle: &TraceBundle, token: usize) -> Vec<f64> {
    let d = bundle.dims;
    let n = d.seq_len();
    let mut head_sum = vec![0.0f64; n * n];
    let norms: Vec<f64> = (0..d.layers)
        .map(|l| {
            head_sum.iter_mut().for_each(|v| *v = 0.0);
            for h in 0..d.heads {
                let g = bundle.gradient_view(token, l, h);
                for (acc, &v) in head_sum.iter_mut().zip(g.iter()) {
                    *acc += f64::from(v);
                }
            }
            head_sum.iter().map(|v| v.abs()).sum()
        })
        .collect();
    normalize_or_uniform(norms).0
}

fn normalize_or_uniform(v: Vec<f64>) -> (Vec<f64>, bool) {
    let total: f64 = v.iter().sum();
    if total > 0.0 && total.is_finite() {
        (v.into_iter().map(|x| x / total).collect(), false)
    } else {
        let n = v.len();
        (uniform(n), true)
    }
}

/// Softmax over depth favoring deeper layers.
pub fn depth_prior(layers: usize, temperature: f64) -> Vec<f64> {
    // exp(t * (l + 1)) differs from exp(t * l) only by a constant factor.
    let scores: Vec<f64> = (0..layers).map(|l| (l + 1) as f64).collect();
    softmax(&scores, 1.0 / temperature)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub grad_norms: Vec<f64>,
    pub depth_prior: Vec<f64>,
    pub alpha: Vec<f64>,
    /// True when `sum(g * s)` was zero and `alpha` fell back to uniform.
    pub degenerate: bool,
}

/// `alpha = g * s / sum(g * s)` with ablation toggles replacing either factor by uniform.
pub fn layer_weights(grad_norms: &[f64], depth_prior: &[f64], config: &EngineConfig) -> Result<LayerWeights> {
    if grad_norms.len() != depth_prior.len() || grad_norms.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient norms vs {} depth weights",
            grad_norms.len(),
            depth_prior.len()
        )));
    }
    let l = grad_norms.len();
    let g = if config.use_layer_relevance {
        grad_norms.to_vec()
    } else {
        uniform(l)
    };
    let s = if config.use_depth_prior {
        depth_prior.to_vec()
    } else {
        uniform(l)
    };
    let products: Vec<f64> = g.iter().zip(&s).map(|(a, b)| a * b).collect();
    let (alpha, degenerate) = normalize_or_uniform(products);
    if degenerate {
        log::warn!("degenerate layer weights (sum of g*s is zero); using uniform alpha");
    }
    Ok(LayerWeights {
        grad_norms: g,
        depth_prior: s,
        alpha,
        degenerate,
    })
}

/// Deepest `ceil(fraction * layers)` layers.
pub fn retained_layers(layers: usize, fraction: f64) -> Range<usize> {
    let keep = ((fraction * layers as f64).ceil() as usize).clamp(1, layers);
    layers - keep..layers
}

/// Propagates relevance through `fused` layers (shallowest first).
///
/// `alpha` covers all layers; only the retained ones are applied, with their
/// weights renormalized to sum to one.
pub fn propagate(fused: &[Array2<f64>], alpha: &[f64], config: &EngineConfig) -> Result<Array2<f64>> {
    if fused.is_empty() || fused.len() != alpha.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fused layers vs {} layer weights",
            fused.len(),
            alpha.len()
        )));
    }
    let n = fused[0].nrows();
    if fused.iter().any(|e| e.shape() != [n, n]) {
        return Err(Error::ShapeMismatch("fused layers must be square and equal".into()));
    }
    let keep = retained_layers(fused.len(), config.layer_fraction);
    let (alpha_kept, _) = normalize_or_uniform(alpha[keep.clone()].to_vec());

    let mut r = Array2::<f64>::eye(n);
    for (e, a) in fused[keep].iter().zip(alpha_kept) {
        let step = e.dot(&r);
        match config.update_rule {
            UpdateRule::Additive => r.scaled_add(a, &step),
            UpdateRule::Literal => {
                r.mapv_inplace(|v| 2.0 * v);
                r.scaled_add(a, &step);
            }
        }
    }
    Ok(r)
}

/// Propagated relevance for one generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix {
    pub matrix: Array2<f64>,
    /// Ordinal of the generated token (`0..T`).
    pub target_token: usize,
    /// Sequence position of the target token.
    pub target_pos: usize,
    pub layer_weights: LayerWeights,
}

impl RelevanceMatrix {
    /// Relevance row of the target token over `cols`.
    pub fn target_row(&self, cols: Range<usize>) -> Vec<f64> {
        cols.map(|c| self.matrix[[self.target_pos, c]]).collect()
    }
}

/// Attention widened to `f64` once per trace: `[layer][head]`.
pub fn widen_attention(bundle: &TraceBundle) -> Vec<Vec<Array2<f64>>> {
    (0..bundle.dims.layers)
        .map(|l| (0..bundle.dims.heads).map(|h| bundle.attention(l, h)).collect())
        .collect()
}

/// Relevance for generated token `token` using pre-widened attention.
pub fn relevance_with_attention(
    bundle: &TraceBundle,
    attention: &[Vec<Array2<f64>>],
    token: usize,
    config: &EngineConfig,
) -> Result<RelevanceMatrix> {
    let d = bundle.dims;
    if token >= d.generated {
        return Err(Error::InvalidArgument(format!(
            "token {token} outside generated range 0..{}",
            d.generated
        )));
    }
    let fused = (0..d.layers)
        .map(|l| {
            let grads: Vec<Array2<f64>> = (0..d.heads).map(|h| bundle.gradient(token, l, h)).collect();
            fuse_layer(
                &attention[l],
                &grads,
                config.fusion_temperature,
                config.use_head_weighting,
            )
            .map(|f| f.fused)
        })
        .collect::<Result<Vec<_>>>()?;
    let norms = layer_gradient_norms(bundle, token);
    let prior = depth_prior(d.layers, config.depth_temperature);
    let weights = layer_weights(&norms, &prior, config)?;
    let matrix = propagate(&fused, &weights.alpha, config)?;
    Ok(RelevanceMatrix {
        matrix,
        target_token: token,
        target_pos: d.generated_pos(token),
        layer_weights: weights,
    })
}

/// Relevance for generated token `token` (ordinal in `0..T`).
pub fn relevance_for_token(bundle: &TraceBundle, token: usize, config: &EngineConfig) -> Result<RelevanceMatrix> {
    config.validate()?;
    relevance_with_attention(bundle, &widen_attention(bundle), token, config)
}
