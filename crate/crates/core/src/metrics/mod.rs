//! Human-alignment metrics (NSS, Spearman) and faithfulness curves.

mod curves;
pub mod oracle;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use curves::{curve_counts, run_curves, PerturbationCurve, PerturbationMode, DEFAULT_LEVELS};

use crate::error::{Error, Result};
use crate::grid::{Grid, PatchGrid};

/// Averaged human fixation density for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanAttentionMap {
    pub grid: Grid,
    pub source_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub nss: f64,
    pub spearman: f64,
}

/// One corpus sample: a trace directory and, optionally, its human map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub trace_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_map_path: Option<PathBuf>,
}

/// Reads a corpus manifest; relative paths resolve against the manifest's directory.
pub fn load_corpus(manifest: &Path) -> Result<Vec<CorpusEntry>> {
    if !manifest.is_file() {
        return Err(Error::MissingFile(manifest.to_path_buf()));
    }
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let entries: Vec<CorpusEntry> = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| CorpusEntry {
            trace_dir: base.join(e.trace_dir),
            human_map_path: e.human_map_path.map(|p| base.join(p)),
        })
        .collect())
}

/// Fraction of source interval `[i, i+1)` falling into each of `bins` equal bins over `[0, len)`.
fn overlap_weights(len: usize, bins: usize) -> Vec<Vec<(usize, f64)>> {
    let width = len as f64 / bins as f64;
    (0..bins)
        .map(|b| {
            let (lo, hi) = (b as f64 * width, (b + 1) as f64 * width);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(len);
            (first..last)
                .filter_map(|i| {
                    let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (w > 0.0).then_some((i, w))
                })
                .collect()
        })
        .collect()
}

/// Area-weighted mean pooling of a pixel map onto the patch grid.
pub fn pool_human_map(map: &Grid, grid: PatchGrid) -> Result<Grid> {
    let (h, w) = map.shape();
    if h < grid.rows || w < grid.cols || grid.rows == 0 || grid.cols == 0 {
        return Err(Error::ShapeMismatch(format!(
            "cannot pool a {h}x{w} map onto a {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let rw = overlap_weights(h, grid.rows);
    let cw = overlap_weights(w, grid.cols);
    let mut out = Grid::zeros(grid.rows, grid.cols);
    for (r, rows) in rw.iter().enumerate() {
        for (c, cols) in cw.iter().enumerate() {
            let mut sum = 0.0;
            let mut area = 0.0;
            for &(y, wy) in rows {
                for &(x, wx) in cols {
                    sum += wy * wx * map.get(y, x);
                    area += wy * wx;
                }
            }
            out.set(r, c, sum / area);
        }
    }
    Ok(out)
}

/// Percentile (`0..=100`) with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_shapes(a: &Grid, b: &Grid) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "saliency {:?} vs human {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::DegenerateInput("empty grids".into()));
    }
    Ok(())
}

/// Normalized scanpath saliency: mean z-scored saliency over cells where the
/// human map reaches its `theta`-th percentile. Population standard deviation.
pub fn nss(saliency: &Grid, human: &Grid, theta: f64) -> Result<f64> {
    check_shapes(saliency, human)?;
    let s = saliency.as_slice();
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateSaliency);
    }
    let threshold = percentile(human.as_slice(), theta);
    let (sum, count) = s
        .iter()
        .zip(human.as_slice())
        .filter(|(_, &h)| h >= threshold)
        .fold((0.0, 0usize), |(acc, k), (&v, _)| (acc + (v - mean) / sd, k + 1));
    Ok(sum / count as f64)
}

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation over flattened cells (average ranks for ties).
pub fn spearman(saliency: &Grid, human: &Grid) -> Result<f64> {
    check_shapes(saliency, human)?;
    if saliency.len() < 2 {
        return Err(Error::DegenerateInput("need at least two cells".into()));
    }
    let constant = |g: &Grid| {
        let (lo, hi) = g.min_max();
        lo == hi
    };
    if constant(saliency) || constant(human) {
        return Err(Error::DegenerateInput("constant grid has no rank order".into()));
    }
    Ok(pearson(
        &average_ranks(saliency.as_slice()),
        &average_ranks(human.as_slice()),
    ))
}

pub fn alignment(saliency: &Grid, human: &Grid, theta: f64) -> Result<AlignmentScore> {
    Ok(AlignmentScore {
        nss: nss(saliency, human, theta)?,
        spearman: spearman(saliency, human)?,
    })
}

/// Patch indices by descending saliency; ties keep ascending index order.
pub fn perturbation_ranking(saliency: &Grid) -> Vec<usize> {
    let s = saliency.as_slice();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// `None` for fewer than two samples.
    pub stderr: Option<f64>,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / n as f64
    };
    let stderr = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    MetricSummary { mean, stderr, n }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentSummary {
    pub nss: MetricSummary,
    pub spearman: MetricSummary,
}

pub fn aggregate_corpus(scores: &[AlignmentScore]) -> AlignmentSummary {
    let nss: Vec<f64> = scores.iter().map(|s| s.nss).collect();
    let rho: Vec<f64> = scores.iter().map(|s| s.spearman).collect();
    AlignmentSummary {
        nss: summarize(&nss),
        spearman: summarize(&rho),
    }
}
