//! Holistic aggregation of per-token relevance rows into visual and prompt
//! saliency, plus file rendering.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::grid::{Grid, PatchGrid};
use crate::relevance::RelevanceMatrix;
use crate::tokens::TokenWeightTable;
use crate::trace::TraceDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Prompt,
}

impl Modality {
    pub fn columns(self, dims: &TraceDims) -> Range<usize> {
        match self {
            Modality::Visual => dims.visual_range(),
            Modality::Prompt => dims.prompt_range(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyResult {
    pub visual: Grid,
    pub prompt: Vec<f64>,
    pub token_gamma: Vec<f64>,
    pub token_gamma_flowed: Option<Vec<f64>>,
    pub config_echo: EngineConfig,
}

/// `sum_t weights[t] * R_t(t, cols)`.
pub fn aggregate_rows(relevances: &[RelevanceMatrix], weights: &[f64], cols: Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; cols.len()];
    for (r, &w) in relevances.iter().zip(weights) {
        for (slot, v) in out.iter_mut().zip(r.target_row(cols.clone())) {
            *slot += w * v;
        }
    }
    out
}

/// Modality saliency weighted by the table's (unflowed) betas.
pub fn aggregate(
    dims: &TraceDims,
    relevances: &[RelevanceMatrix],
    table: &TokenWeightTable,
    modality: Modality,
) -> Vec<f64> {
    let weights = match modality {
        Modality::Visual => &table.beta_visual,
        Modality::Prompt => &table.beta_prompt,
    };
    aggregate_rows(relevances, weights, modality.columns(dims))
}

/// Row-major reshape of a per-patch vector onto the patch grid.
pub fn project_to_grid(values: &[f64], grid: PatchGrid) -> Result<Grid> {
    if values.len() != grid.cells() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {}x{} grid",
            values.len(),
            grid.rows,
            grid.cols
        )));
    }
    Grid::new(grid.rows, grid.cols, values.to_vec())
}

/// Display-side options. None of these affect metric inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderOptions {
    /// Gaussian blur sigma in patch units; 0 disables.
    pub blur_sigma: f64,
    pub overlay_opacity: f64,
    pub image: Option<PathBuf>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            blur_sigma: 0.0,
            overlay_opacity: 0.5,
            image: None,
        }
    }
}

/// Display-normalized heatmap: min-max scaled (constant maps become zero),
/// blurred first when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRender {
    pub normalized: Grid,
    pub blur_sigma: f64,
    pub opacity: f64,
}

impl HeatmapRender {
    pub fn new(visual: &Grid, opts: &RenderOptions) -> Self {
        let base = if opts.blur_sigma > 0.0 {
            visual.gaussian_blur(opts.blur_sigma)
        } else {
            visual.clone()
        };
        Self {
            normalized: base.normalized(),
            blur_sigma: opts.blur_sigma,
            opacity: opts.overlay_opacity,
        }
    }

    /// Heatmap resized to `width x height` and alpha-blended over `image`.
    pub fn overlay(&self, image: &image::RgbImage) -> image::RgbImage {
        let (w, h) = image.dimensions();
        let heat = &self.normalized;
        let mut out = image.clone();
        for (x, y, px) in out.enumerate_pixels_mut() {
            let v = bilinear(heat, (x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let color = jet(v);
            for c in 0..3 {
                let blended = (1.0 - self.opacity) * px[c] as f64 + self.opacity * color[c] as f64;
                px[c] = blended.round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

fn bilinear(g: &Grid, u: f64, v: f64) -> f64 {
    let x = (u * g.cols() as f64 - 0.5).clamp(0.0, (g.cols() - 1) as f64);
    let y = (v * g.rows() as f64 - 0.5).clamp(0.0, (g.rows() - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(g.cols() - 1), (y0 + 1).min(g.rows() - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = g.get(y0, x0) * (1.0 - fx) + g.get(y0, x1) * fx;
    let bottom = g.get(y1, x0) * (1.0 - fx) + g.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [
        (255.0 * channel(3.0)) as u8,
        (255.0 * channel(2.0)) as u8,
        (255.0 * channel(1.0)) as u8,
    ]
}

#[derive(Debug, Serialize)]
struct GeneratedTokenRecord<'a> {
    index: usize,
    position: usize,
    text: &'a str,
    function_word: bool,
    confidence: f64,
    prompt_alignment: f64,
    visual_alignment: f64,
    beta_visual: f64,
    beta_prompt: f64,
    gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_visual_flowed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_prompt_flowed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma_flowed: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PromptTokenRecord<'a> {
    index: usize,
    text: &'a str,
    saliency: f64,
}

#[derive(Debug, Serialize)]
struct TokensFile<'a> {
    trace_id: &'a str,
    flow_applied: bool,
    flow_strength: f64,
    generated: Vec<GeneratedTokenRecord<'a>>,
    prompt: Vec<PromptTokenRecord<'a>>,
}

/// Everything `render` needs besides the maps themselves.
pub struct RenderInput<'a> {
    pub trace_id: &'a str,
    pub dims: TraceDims,
    pub result: &'a SaliencyResult,
    pub table: &'a TokenWeightTable,
    pub generated_texts: &'a [String],
    pub prompt_texts: &'a [String],
    pub function_word_mask: &'a [bool],
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `saliency.csv`, `saliency.pgm`, `prompt_saliency.csv`, `tokens.json`
/// and, when a readable source image is given, `overlay.png` into `out_dir`.
/// Returns the paths written.
pub fn render(input: &RenderInput<'_>, opts: &RenderOptions, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = render_visual(&input.result.visual, opts, out_dir)?;

    let mut prompt_csv = String::from("index,token,saliency\n");
    for (i, (text, v)) in input.prompt_texts.iter().zip(&input.result.prompt).enumerate() {
        prompt_csv.push_str(&format!(
            "{i},{},{}\n",
            csv_escape(text),
            crate::grid::format_sci(*v)
        ));
    }
    let p = out_dir.join("prompt_saliency.csv");
    write(&p, prompt_csv)?;
    written.push(p);

    let t = input.table;
    let pick = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map(|x| x[i]);
    let generated = input
        .generated_texts
        .iter()
        .enumerate()
        .map(|(i, text)| GeneratedTokenRecord {
            index: i,
            position: input.dims.generated_pos(i),
            text,
            function_word: input.function_word_mask.get(i).copied().unwrap_or(false),
            confidence: t.confidence[i],
            prompt_alignment: t.prompt_alignment[i],
            visual_alignment: t.visual_alignment[i],
            beta_visual: t.beta_visual[i],
            beta_prompt: t.beta_prompt[i],
            gamma: t.gamma[i],
            beta_visual_flowed: pick(&t.beta_visual_flowed, i),
            beta_prompt_flowed: pick(&t.beta_prompt_flowed, i),
            gamma_flowed: pick(&t.gamma_flowed, i),
        })
        .collect();
    let prompt = input
        .prompt_texts
        .iter()
        .zip(&input.result.prompt)
        .enumerate()
        .map(|(index, (text, &saliency))| PromptTokenRecord {
            index,
            text,
            saliency,
        })
        .collect();
    let tokens = TokensFile {
        trace_id: input.trace_id,
        flow_applied: t.flow_applied,
        flow_strength: t.flow_strength,
        generated,
        prompt,
    };
    let p = out_dir.join("tokens.json");
    write(&p, serde_json::to_string_pretty(&tokens).expect("tokens serialize"))?;
    written.push(p);
    Ok(written)
}

/// Writes the visual map files only (`saliency.csv`, `saliency.pgm`, optional overlay).
pub fn render_visual(visual: &Grid, opts: &RenderOptions, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let p = out_dir.join("saliency.csv");
    write(&p, visual.to_csv())?;
    written.push(p);

    let heat = HeatmapRender::new(visual, opts);
    let p = out_dir.join("saliency.pgm");
    write(&p, heat.normalized.to_pgm())?;
    written.push(p);

    if let Some(image_path) = &opts.image {
        match image::open(image_path) {
            Ok(img) => {
                let overlay = heat.overlay(&img.to_rgb8());
                let p = out_dir.join("overlay.png");
                overlay
                    .save(&p)
                    .map_err(|e| Error::io(&p, std::io::Error::other(e)))?;
                written.push(p);
            }
            Err(e) => log::warn!(
                "overlay skipped: cannot read image {}: {e}",
                image_path.display()
            ),
        }
    }
    Ok(written)
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
