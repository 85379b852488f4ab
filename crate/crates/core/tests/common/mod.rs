//! Shared fixtures and independent reference implementations for integration tests.
//!
//! The oracles here are deliberately naive: plain nested loops over `Vec`s,
//! or exact rational arithmetic, with no calls into the engine's numerics.

#![allow(dead_code)]

use glimpse::grid::PatchGrid;
use glimpse::rng::XorShift64Star;
use glimpse::trace::{TraceBundle, TraceDims};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

/// A random but valid trace: causal softmax-like attention rows, signed
/// gradients, random confidences and function-word mask.
pub fn random_trace(seed: u64, dims: TraceDims) -> TraceBundle {
    let mut rng = XorShift64Star::new(seed);
    let n = dims.seq_len();
    let mut attention = vec![0.0f32; dims.tensor_len()];
    for block in attention.chunks_exact_mut(n * n) {
        for i in 0..n {
            let w: Vec<f64> = (0..=i).map(|_| 0.05 + rng.next_f64()).collect();
            let s: f64 = w.iter().sum();
            for (j, v) in w.iter().enumerate() {
                block[i * n + j] = (v / s) as f32;
            }
        }
    }
    let gradients = (0..dims.generated)
        .map(|_| {
            let mut g = vec![0.0f32; dims.tensor_len()];
            for block in g.chunks_exact_mut(n * n) {
                for i in 0..n {
                    for j in 0..=i {
                        block[i * n + j] = (2.0 * rng.next_f64() - 1.0) as f32;
                    }
                }
            }
            g
        })
        .collect();
    let texts = (0..n).map(|i| format!("tok{i}")).collect();
    TraceBundle {
        id: format!("rand-{seed}"),
        dims,
        patch_grid: PatchGrid::squarest(dims.visual),
        attention,
        gradients,
        token_texts: texts,
        confidences: (0..dims.generated).map(|_| 0.05 + 0.9 * rng.next_f64()).collect(),
        function_word_mask: (0..dims.generated).map(|_| rng.next_f64() < 0.4).collect(),
        image_path: None,
    }
}

/// Random small dims with N <= `max_n`, L <= `max_l`, H <= `max_h`.
pub fn random_dims(rng: &mut XorShift64Star, max_n: usize, max_l: usize, max_h: usize) -> TraceDims {
    let n = 3 + rng.below(max_n - 2);
    let k = 1 + rng.below(n - 2);
    let m = 1 + rng.below(n - k - 1);
    let t = n - k - m;
    TraceDims::new(1 + rng.below(max_l), 1 + rng.below(max_h), k, m, t)
}

pub type Mat = Vec<Vec<f64>>;

fn zeros(n: usize) -> Mat {
    vec![vec![0.0; n]; n]
}

fn attn(b: &TraceBundle, l: usize, h: usize, i: usize, j: usize) -> f64 {
    let n = b.dims.seq_len();
    b.attention[((l * b.dims.heads + h) * n + i) * n + j] as f64
}

fn grad(b: &TraceBundle, t: usize, l: usize, h: usize, i: usize, j: usize) -> f64 {
    let n = b.dims.seq_len();
    b.gradients[t][((l * b.dims.heads + h) * n + i) * n + j] as f64
}

fn softmax(x: &[f64], temp: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - m) / temp).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Scalar recomputation of the fused per-layer matrices and layer weights for
/// token `t` with default temperatures (0.5 fusion, 0.2 depth).
pub struct NaiveLayers {
    pub fused: Vec<Mat>,
    pub alpha: Vec<f64>,
}

pub fn naive_layers(b: &TraceBundle, t: usize, fusion_temp: f64, depth_temp: f64) -> NaiveLayers {
    let d = b.dims;
    let n = d.seq_len();
    let mut fused = Vec::new();
    let mut norms = Vec::new();
    for l in 0..d.layers {
        let mut ratios = Vec::new();
        let mut gs = Vec::new();
        for h in 0..d.heads {
            let mut g = zeros(n);
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let v = attn(b, l, h, i, j) * grad(b, t, l, h, i, j);
                    g[i][j] = if v > 0.0 { v } else { 0.0 };
                    num += g[i][j];
                    let gv = grad(b, t, l, h, i, j);
                    if gv > 0.0 {
                        den += gv;
                    }
                }
            }
            ratios.push(if den > 0.0 { num / den } else { 0.0 });
            gs.push(g);
        }
        let w = softmax(&ratios, fusion_temp);
        let mut e = zeros(n);
        for i in 0..n {
            for j in 0..n {
                for h in 0..d.heads {
                    e[i][j] += w[h] * gs[h][i][j];
                }
            }
            let s: f64 = e[i].iter().sum();
            if s > 0.0 {
                for j in 0..n {
                    e[i][j] /= s;
                }
            }
        }
        fused.push(e);
        let mut norm = 0.0;
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..d.heads).map(|h| grad(b, t, l, h, i, j)).sum();
                norm += s.abs();
            }
        }
        norms.push(norm);
    }
    let total: f64 = norms.iter().sum();
    let g: Vec<f64> = norms.iter().map(|v| v / total).collect();
    let depth: Vec<f64> = softmax(&(1..=d.layers).map(|l| l as f64).collect::<Vec<_>>(), 1.0 / depth_temp);
    let prod: Vec<f64> = g.iter().zip(&depth).map(|(a, b)| a * b).collect();
    let ps: f64 = prod.iter().sum();
    NaiveLayers {
        fused,
        alpha: prod.iter().map(|v| v / ps).collect(),
    }
}

/// `R = I; for each layer: R = R + a * E * R` with explicit triple loops.
pub fn naive_propagate(fused: &[Mat], alpha: &[f64]) -> Mat {
    let n = fused[0].len();
    let mut r = zeros(n);
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for (e, a) in fused.iter().zip(alpha) {
        let mut next = r.clone();
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += e[i][k] * r[k][j];
                }
                next[i][j] += a * acc;
            }
        }
        r = next;
    }
    r
}

pub fn to_rational(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite")
}

/// The same additive propagation in exact rational arithmetic.
pub fn exact_propagate(fused: &[Vec<Vec<f64>>], alpha: &[f64]) -> Vec<Vec<BigRational>> {
    let n = fused[0].len();
    let one = BigRational::from_integer(BigInt::from(1));
    let mut r: Vec<Vec<BigRational>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { one.clone() } else { BigRational::zero() }).collect())
        .collect();
    for (e, a) in fused.iter().zip(alpha) {
        let e: Vec<Vec<BigRational>> = e.iter().map(|row| row.iter().map(|&v| to_rational(v)).collect()).collect();
        let a = to_rational(*a);
        let mut next = r.clone();
        for i in 0..n {
            for j in 0..n {
                let mut acc = BigRational::zero();
                for k in 0..n {
                    if !e[i][k].is_zero() && !r[k][j].is_zero() {
                        acc += &e[i][k] * &r[k][j];
                    }
                }
                next[i][j] += &a * acc;
            }
        }
        r = next;
    }
    r
}

/// Largest absolute deviation divided by the largest reference magnitude.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    got.iter()
        .zip(want)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

pub fn rational_to_f64(m: &[Vec<BigRational>]) -> Vec<f64> {
    m.iter().flatten().map(|v| v.to_f64().unwrap()).collect()
}

/// Ranks by counting: `1 + #smaller + (#equal - 1) / 2`.
pub fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let eq = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

pub fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..x.len() {
        num += (x[i] - mx) * (y[i] - my);
        dx += (x[i] - mx) * (x[i] - mx);
        dy += (y[i] - my) * (y[i] - my);
    }
    num / (dx.sqrt() * dy.sqrt())
}

/// One-sided exact sign test: P(X >= wins) for X ~ Binomial(n, 1/2), ties dropped.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut p = 0.0;
    for k in wins..=n {
        p += binomial(n, k) * 0.5f64.powi(n as i32);
    }
    p
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
