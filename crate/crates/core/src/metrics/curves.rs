//! Deletion / insertion faithfulness curves.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::oracle::{ConfidenceOracle, OracleRequest};
use crate::error::{Error, Result};

/// Perturbation spans reported by default: top 5%, 15% and 30% of patches.
pub const DEFAULT_LEVELS: [f64; 3] = [0.05, 0.15, 0.30];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbationMode {
    #[serde(rename = "delete")]
    Deletion,
    #[serde(rename = "insert")]
    Insertion,
}

impl PerturbationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbationMode::Deletion => "delete",
            PerturbationMode::Insertion => "insert",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationCurve {
    pub mode: PerturbationMode,
    pub level: f64,
    /// Perturbed fraction of patches at each point, from 0 to the realized span.
    pub fractions: Vec<f64>,
    /// Likelihoods mapped so the blurred baseline is 0 and the clean image is 1.
    pub scores: Vec<f64>,
    /// Trapezoidal area divided by the span.
    pub auc: f64,
}

/// Cumulative patch counts queried for one level.
///
/// The level covers `round(K * level)` patches (at least one); points are
/// spaced `step` patches apart, defaulting to `max(1, round(K * level / 20))`,
/// and the final count is always included.
pub fn curve_counts(k: usize, level: f64, step: Option<usize>) -> Vec<usize> {
    let total = ((k as f64 * level).round() as usize).clamp(1, k);
    let step = step
        .unwrap_or_else(|| (k as f64 * level / 20.0).round() as usize)
        .max(1);
    let mut counts: Vec<usize> = (0..total).step_by(step).collect();
    counts.push(total);
    counts
}

fn trapezoid_mean(xs: &[f64], ys: &[f64]) -> f64 {
    let span = xs[xs.len() - 1] - xs[0];
    let area: f64 = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum();
    area / span
}

/// Runs one curve per level for `mode`, perturbing patches in `ranking` order.
///
/// Two anchor queries fix the normalization: deleting nothing gives the clean
/// likelihood (score 1), inserting nothing gives the blurred baseline (score 0).
/// Identical perturbation prefixes are queried once and shared across levels.
pub fn run_curves(
    oracle: &mut dyn ConfidenceOracle,
    trace_id: &str,
    visual_tokens: usize,
    ranking: &[usize],
    mode: PerturbationMode,
    levels: &[f64],
    step: Option<usize>,
) -> Result<Vec<PerturbationCurve>> {
    let k = visual_tokens;
    if ranking.len() != k {
        return Err(Error::InvalidArgument(format!(
            "ranking has {} entries for K={k}",
            ranking.len()
        )));
    }
    let mut seen = vec![false; k];
    for &p in ranking {
        if p >= k || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument(format!("ranking is not a permutation (patch {p})")));
        }
    }
    if let Some(bad) = levels.iter().find(|l| !(**l > 0.0 && **l <= 1.0)) {
        return Err(Error::InvalidArgument(format!("level {bad} outside (0, 1]")));
    }

    let mut cache: HashMap<(PerturbationMode, usize), f64> = HashMap::new();
    let mut next_id = 0u64;
    let mut query = |mode: PerturbationMode, count: usize| -> Result<f64> {
        if let Some(v) = cache.get(&(mode, count)) {
            return Ok(*v);
        }
        next_id += 1;
        let req = OracleRequest {
            id: next_id,
            trace_id: trace_id.to_string(),
            mode,
            patch_indices: ranking[..count].to_vec(),
        };
        let v = oracle.query(&req)?;
        if !v.is_finite() {
            return Err(Error::OracleMalformed(format!("non-finite likelihood {v}")));
        }
        cache.insert((mode, count), v);
        Ok(v)
    };

    let clean = query(PerturbationMode::Deletion, 0)?;
    let blurred = query(PerturbationMode::Insertion, 0)?;
    let range = clean - blurred;
    if range.abs() < 1e-12 {
        return Err(Error::OracleMalformed(format!(
            "clean ({clean}) and blurred ({blurred}) likelihoods coincide"
        )));
    }

    levels
        .iter()
        .map(|&level| {
            let counts = curve_counts(k, level, step);
            let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / k as f64).collect();
            let scores = counts
                .iter()
                .map(|&c| query(mode, c).map(|ll| (ll - blurred) / range))
                .collect::<Result<Vec<_>>>()?;
            let auc = trapezoid_mean(&fractions, &scores);
            Ok(PerturbationCurve {
                mode,
                level,
                fractions,
                scores,
                auc,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::oracle::FnOracle;

    #[test]
    fn counts_cover_level() {
        assert_eq!(curve_counts(100, 0.05, None), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(curve_counts(100, 0.30, None).len(), 16);
        assert_eq!(*curve_counts(100, 0.30, None).last().unwrap(), 30);
        assert_eq!(curve_counts(10, 0.05, None), vec![0, 1]);
        assert_eq!(curve_counts(10, 0.5, Some(2)), vec![0, 2, 4, 5]);
    }

    #[test]
    fn trapezoid_on_a_line() {
        let xs = [0.0, 0.1, 0.2];
        let ys = [1.0, 0.5, 0.0];
        assert!((trapezoid_mean(&xs, &ys) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_clean_oracle_gives_unit_deletion_auc() {
        let ranking: Vec<usize> = (0..100).collect();
        let mut oracle = FnOracle::new(|req: &OracleRequest| match req.mode {
            PerturbationMode::Deletion => 0.0,
            PerturbationMode::Insertion => -5.0,
        });
        let curves = run_curves(
            &mut oracle,
            "t",
            100,
            &ranking,
            PerturbationMode::Deletion,
            &DEFAULT_LEVELS,
            None,
        )
        .unwrap();
        for c in curves {
            assert!((c.auc - 1.0).abs() < 1e-12);
            assert_eq!(c.fractions[0], 0.0);
        }
    }

    #[test]
    fn blurred_oracle_gives_zero_insertion_auc() {
        let ranking: Vec<usize> = (0..40).collect();
        let mut oracle = FnOracle::new(|req: &OracleRequest| match req.mode {
            PerturbationMode::Deletion if req.patch_indices.is_empty() => -1.0,
            _ => -3.0,
        });
        let curves = run_curves(&mut oracle, "t", 40, &ranking, PerturbationMode::Insertion, &[0.25], None).unwrap();
        assert!(curves[0].auc.abs() < 1e-12);
    }

    #[test]
    fn bad_inputs() {
        let mut oracle = FnOracle::new(|_: &OracleRequest| 0.0);
        let err = run_curves(&mut oracle, "t", 3, &[0, 1, 2], PerturbationMode::Deletion, &[0.5], None);
        assert!(matches!(err, Err(Error::OracleMalformed(_))));
        let err = run_curves(&mut oracle, "t", 3, &[0, 1, 1], PerturbationMode::Deletion, &[0.5], None);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err = run_curves(&mut oracle, "t", 3, &[0, 1, 2], PerturbationMode::Deletion, &[1.5], None);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
