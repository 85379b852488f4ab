//! Deterministic synthetic traces with planted visual evidence.
//!
//! Each generated token is either *grounded* (high confidence, deep-layer
//! gradient mass on the planted patches) or *ungrounded* (low confidence,
//! deep-layer gradient mass on its own random patches). Every token also
//! receives early-layer gradient mass on a set of decoy patches. Gradient
//! noise and attention are drawn from streams that never look at the
//! planted set, so with `signal_strength == 0` the gradients do not depend
//! on `planted_patches` at all.
//!
//! Attention rows are `0.5 + U[0,1)` over the causal prefix, renormalized.
//! Noise is the Irwin-Hall approximation from [`crate::rng`]. No libm calls
//! are made while building a trace, so bundles are bit-identical across
//! platforms for a fixed seed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{save_trace, TraceBundle, TraceDims};
use crate::error::{Error, Result};
use crate::grid::{Grid, PatchGrid};
use crate::metrics::{CorpusEntry, HumanAttentionMap};
use crate::rng::XorShift64Star;

/// Sidecar written next to synthetic traces; read by the synthetic oracle.
pub const SYNTH_SIDECAR: &str = "synth.json";

const STOP_WORD_LIST: &str = include_str!("../../data/stopwords.txt");

const NOISE_SCALE: f64 = 0.1;
const DECOY_GAIN: f64 = 1.5;
const PROMPT_GAIN_GROUNDED: f64 = 0.5;
const PROMPT_GAIN_UNGROUNDED: f64 = 0.25;
const GROUNDED_PROB: f64 = 0.6;

const STREAM_ATTENTION: u64 = 1;
const STREAM_ROLES: u64 = 2;
const STREAM_DECOYS: u64 = 3;
const STREAM_HALLUCINATION: u64 = 4;
const STREAM_TEXT: u64 = 5;
const STREAM_CORPUS: u64 = 6;
const STREAM_HUMAN: u64 = 50;
const STREAM_NOISE: u64 = 100;

const PROMPT_WORDS: &[&str] = &["What", "is", "on", "the", "table", "?"];
const GROUNDED_WORDS: &[&str] = &["bird", "red", "cup", "left", "wooden", "mustard", "sign", "tree"];
const UNGROUNDED_WORDS: &[&str] = &["dog", "probably", "blue", "maybe", "car", "several"];
const FILLER_WORDS: &[&str] = &["the", "is", "of", "a", "and", "."];

/// True when `token` (trimmed, case-insensitive) is in the shipped stop-word list.
pub fn is_function_word(token: &str) -> bool {
    let t = token.trim().to_lowercase();
    STOP_WORD_LIST.lines().any(|w| w.trim() == t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: TraceDims,
    pub planted_patches: Vec<usize>,
    pub signal_strength: f64,
    pub rng_seed: u64,
    /// Defaults to the most square factorization of K.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_grid: Option<PatchGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl SynthSpec {
    pub fn new(dims: TraceDims, planted_patches: Vec<usize>, signal_strength: f64, rng_seed: u64) -> Self {
        Self {
            dims,
            planted_patches,
            signal_strength,
            rng_seed,
            patch_grid: None,
            id: None,
        }
    }

    /// Trace id: the explicit `id`, else `synth-<seed>`.
    pub fn trace_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| format!("synth-{}", self.rng_seed))
    }

    pub fn grid(&self) -> PatchGrid {
        self.patch_grid
            .unwrap_or_else(|| PatchGrid::squarest(self.dims.visual))
    }

    fn check(&self) -> Result<()> {
        let d = self.dims;
        if !d.is_valid() {
            return Err(Error::InvalidSpec(format!("dims must all be >= 1, got {d:?}")));
        }
        if let Some(&p) = self.planted_patches.iter().find(|&&p| p >= d.visual) {
            return Err(Error::InvalidSpec(format!(
                "planted patch {p} outside [0, {})",
                d.visual
            )));
        }
        let mut sorted = self.planted_patches.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.planted_patches.len() {
            return Err(Error::InvalidSpec("duplicate planted patches".into()));
        }
        if !(self.signal_strength >= 0.0) || !self.signal_strength.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "signal_strength must be finite and >= 0, got {}",
                self.signal_strength
            )));
        }
        if self.grid().cells() != d.visual {
            return Err(Error::InvalidSpec(format!(
                "patch grid {:?} does not cover K={}",
                self.grid(),
                d.visual
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Grounded,
    Ungrounded,
}

/// Builds a trace from `spec`. Deterministic in `spec`.
pub fn synth_trace(spec: &SynthSpec) -> Result<TraceBundle> {
    spec.check()?;
    let d = spec.dims;
    let n = d.seq_len();
    let seed = spec.rng_seed;
    let s = spec.signal_strength;
    let planted_count = spec.planted_patches.len().max(1);

    let mut attention = vec![0.0f32; d.tensor_len()];
    let mut rng = XorShift64Star::stream(seed, STREAM_ATTENTION);
    let mut row = vec![0.0f64; n];
    for block in attention.chunks_exact_mut(n * n) {
        for i in 0..n {
            let mut sum = 0.0;
            for w in row.iter_mut().take(i + 1) {
                *w = 0.5 + rng.next_f64();
                sum += *w;
            }
            for j in 0..=i {
                block[i * n + j] = (row[j] / sum) as f32;
            }
        }
    }

    let mut roles_rng = XorShift64Star::stream(seed, STREAM_ROLES);
    let roles: Vec<Role> = (0..d.generated)
        .map(|t| {
            let u = roles_rng.next_f64();
            if t == 0 || u < GROUNDED_PROB {
                Role::Grounded
            } else {
                Role::Ungrounded
            }
        })
        .collect();
    let confidences: Vec<f64> = roles
        .iter()
        .map(|r| {
            let u = roles_rng.next_f64();
            match r {
                Role::Grounded => 0.75 + 0.24 * u,
                Role::Ungrounded => 0.05 + 0.25 * u,
            }
        })
        .collect();

    let decoys = XorShift64Star::stream(seed, STREAM_DECOYS).sample_distinct(
        d.visual,
        planted_count,
        &spec.planted_patches,
    );
    let mut halluc_rng = XorShift64Star::stream(seed, STREAM_HALLUCINATION);
    let hallucinated: Vec<Vec<usize>> = (0..d.generated)
        .map(|_| halluc_rng.sample_distinct(d.visual, planted_count, &[]))
        .collect();

    let head_gain = |h: usize| {
        if d.heads == 1 {
            1.0
        } else {
            1.0 - 0.6 * h as f64 / (d.heads - 1) as f64
        }
    };
    let early_layers = d.layers / 2;

    let mut gradients = Vec::with_capacity(d.generated);
    let mut scratch = vec![0.0f64; n * n];
    for t in 0..d.generated {
        let q = d.generated_pos(t);
        let mut noise = XorShift64Star::stream(seed, STREAM_NOISE + t as u64);
        let mut tensor = vec![0.0f32; d.tensor_len()];
        for l in 0..d.layers {
            for h in 0..d.heads {
                for i in 0..n {
                    for j in 0..n {
                        scratch[i * n + j] = if j <= i {
                            NOISE_SCALE * noise.next_normalish()
                        } else {
                            0.0
                        };
                    }
                }
                let gain = s * head_gain(h);
                let target = if l < early_layers {
                    decoys.iter().map(|&p| (p, DECOY_GAIN)).collect::<Vec<_>>()
                } else {
                    let cols = match roles[t] {
                        Role::Grounded => &spec.planted_patches,
                        Role::Ungrounded => &hallucinated[t],
                    };
                    cols.iter().map(|&p| (p, 1.0)).collect()
                };
                for (col, w) in target {
                    scratch[q * n + col] += gain * w;
                }
                let prompt_gain = match roles[t] {
                    Role::Grounded => PROMPT_GAIN_GROUNDED,
                    Role::Ungrounded => PROMPT_GAIN_UNGROUNDED,
                };
                for col in d.prompt_range() {
                    scratch[q * n + col] += gain * prompt_gain;
                }
                let start = (l * d.heads + h) * n * n;
                for (dst, &src) in tensor[start..start + n * n].iter_mut().zip(&scratch) {
                    *dst = src as f32;
                }
            }
        }
        gradients.push(tensor);
    }

    let grid = spec.grid();
    let mut text_rng = XorShift64Star::stream(seed, STREAM_TEXT);
    let mut token_texts = Vec::with_capacity(n);
    for k in 0..d.visual {
        token_texts.push(format!("<patch_{}_{}>", k / grid.cols, k % grid.cols));
    }
    for m in 0..d.prompt {
        token_texts.push(PROMPT_WORDS[m % PROMPT_WORDS.len()].to_string());
    }
    for role in &roles {
        let word = match role {
            Role::Grounded => GROUNDED_WORDS[text_rng.below(GROUNDED_WORDS.len())],
            Role::Ungrounded if text_rng.next_f64() < 0.5 => {
                FILLER_WORDS[text_rng.below(FILLER_WORDS.len())]
            }
            Role::Ungrounded => UNGROUNDED_WORDS[text_rng.below(UNGROUNDED_WORDS.len())],
        };
        token_texts.push(word.to_string());
    }
    let function_word_mask = token_texts[d.generated_range()]
        .iter()
        .map(|w| is_function_word(w))
        .collect();

    Ok(TraceBundle {
        id: spec.trace_id(),
        dims: d,
        patch_grid: grid,
        attention,
        gradients,
        token_texts,
        confidences,
        function_word_mask,
        image_path: None,
    })
}

/// Pixel-level human attention map for a synthetic trace: three simulated
/// annotators, each a Gaussian blob around every planted patch with jitter,
/// averaged. `pixels_per_cell` controls the upsampling factor.
pub fn synth_human_map(spec: &SynthSpec, pixels_per_cell: usize) -> Result<HumanAttentionMap> {
    spec.check()?;
    const ANNOTATORS: usize = 3;
    const SIGMA: f64 = 0.8;
    let grid = spec.grid();
    let ppc = pixels_per_cell.max(1);
    let (h, w) = (grid.rows * ppc, grid.cols * ppc);
    let mut pixels = vec![0.0; h * w];
    for a in 0..ANNOTATORS {
        let mut rng = XorShift64Star::stream(spec.rng_seed, STREAM_HUMAN + a as u64);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let mut v = 0.0;
                for &p in &spec.planted_patches {
                    let (pr, pc) = ((p / grid.cols) as f64, (p % grid.cols) as f64);
                    let d2 = (r as f64 - pr).powi(2) + (c as f64 - pc).powi(2);
                    v += (-d2 / (2.0 * SIGMA * SIGMA)).exp() * (0.8 + 0.4 * rng.next_f64());
                }
                v += 0.05 * rng.next_f64();
                for y in r * ppc..(r + 1) * ppc {
                    for x in c * ppc..(c + 1) * ppc {
                        pixels[y * w + x] += v / ANNOTATORS as f64;
                    }
                }
            }
        }
    }
    Ok(HumanAttentionMap {
        grid: Grid::new(h, w, pixels)?,
        source_count: ANNOTATORS,
    })
}

/// Writes `count` planted-signal traces derived from `base` under `out_dir`:
/// `traces/<id>/` (with a `synth.json` sidecar), `human/<id>.csv` and a
/// `corpus.json` manifest with paths relative to `out_dir`. Each trace gets
/// its own seed (`base.rng_seed + i`) and `planted_count` random planted patches.
pub fn synth_corpus(
    base: &SynthSpec,
    count: usize,
    planted_count: usize,
    out_dir: &Path,
) -> Result<Vec<CorpusEntry>> {
    if planted_count == 0 || planted_count > base.dims.visual {
        return Err(Error::InvalidSpec(format!(
            "planted_count {planted_count} outside [1, K={}]",
            base.dims.visual
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let seed = base.rng_seed.wrapping_add(i as u64);
        let planted = XorShift64Star::stream(seed, STREAM_CORPUS).sample_distinct(
            base.dims.visual,
            planted_count,
            &[],
        );
        let id = format!("synth_{i:03}");
        let spec = SynthSpec {
            planted_patches: planted,
            rng_seed: seed,
            id: Some(id.clone()),
            ..base.clone()
        };
        let trace = synth_trace(&spec)?;
        let trace_rel = Path::new("traces").join(&id);
        let trace_dir = out_dir.join(&trace_rel);
        save_trace(&trace, &trace_dir)?;
        write_sidecar(&spec, &trace_dir)?;

        let human_rel = Path::new("human").join(format!("{id}.csv"));
        let human_path = out_dir.join(&human_rel);
        let human_dir = out_dir.join("human");
        fs::create_dir_all(&human_dir).map_err(|e| Error::io(&human_dir, e))?;
        let human = synth_human_map(&spec, 4)?;
        fs::write(&human_path, human.grid.to_csv()).map_err(|e| Error::io(&human_path, e))?;
        entries.push(CorpusEntry {
            trace_dir: trace_rel,
            human_map_path: Some(human_rel),
        });
    }
    let manifest = out_dir.join("corpus.json");
    let json = serde_json::to_string_pretty(&entries).expect("entries serialize");
    fs::write(&manifest, json).map_err(|e| Error::io(&manifest, e))?;
    Ok(entries)
}

pub(crate) fn write_sidecar(spec: &SynthSpec, trace_dir: &Path) -> Result<()> {
    let path = trace_dir.join(SYNTH_SIDECAR);
    let json = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads the synthesis spec stored next to a synthetic trace.
pub fn load_synth_sidecar(trace_dir: &Path) -> Result<SynthSpec> {
    let path = trace_dir.join(SYNTH_SIDECAR);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
        path,
        reason: e.to_string(),
    })
}
