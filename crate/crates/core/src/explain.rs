//! End-to-end explanation of one trace.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::baselines::{baseline_map, BaselineKind};
use crate::config::{EngineConfig, TokenConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::relevance::{relevance_with_attention, widen_attention, RelevanceMatrix};
use crate::saliency::{aggregate, project_to_grid, Modality, RenderInput, SaliencyResult};
use crate::tokens::{build_token_table, TokenWeightTable};
use crate::trace::TraceBundle;

#[derive(Debug, Clone)]
pub struct Explanation {
    pub trace_id: String,
    pub relevances: Vec<RelevanceMatrix>,
    pub table: TokenWeightTable,
    pub result: SaliencyResult,
}

impl Explanation {
    pub fn render_input<'a>(&'a self, bundle: &'a TraceBundle) -> RenderInput<'a> {
        RenderInput {
            trace_id: &self.trace_id,
            dims: bundle.dims,
            result: &self.result,
            table: &self.table,
            generated_texts: bundle.generated_texts(),
            prompt_texts: bundle.prompt_texts(),
            function_word_mask: &bundle.function_word_mask,
        }
    }
}

/// Per-token relevance for every generated token. Tokens are independent and
/// computed in parallel; the result is identical to a sequential run.
pub fn token_relevances(bundle: &TraceBundle, engine: &EngineConfig) -> Result<Vec<RelevanceMatrix>> {
    engine.validate()?;
    let attention = widen_attention(bundle);
    (0..bundle.dims.generated)
        .into_par_iter()
        .map(|t| relevance_with_attention(bundle, &attention, t, engine))
        .collect()
}

/// Visual map, prompt map and token relevance for `bundle`.
pub fn explain(bundle: &TraceBundle, engine: &EngineConfig, tokens: &TokenConfig) -> Result<Explanation> {
    let relevances = token_relevances(bundle, engine)?;
    let table = build_token_table(bundle, &relevances, tokens)?;
    let d = &bundle.dims;
    let visual = aggregate(d, &relevances, &table, Modality::Visual);
    let prompt = aggregate(d, &relevances, &table, Modality::Prompt);
    let result = SaliencyResult {
        visual: project_to_grid(&visual, bundle.patch_grid)?,
        prompt,
        token_gamma: table.gamma.clone(),
        token_gamma_flowed: table.gamma_flowed.clone(),
        config_echo: engine.clone(),
    };
    Ok(Explanation {
        trace_id: bundle.id.clone(),
        relevances,
        table,
        result,
    })
}

/// Any explainer producing a visual map: the engine itself or a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Glimpse,
    Baseline(BaselineKind),
}

impl Method {
    pub fn visual_map(&self, bundle: &TraceBundle, engine: &EngineConfig, tokens: &TokenConfig) -> Result<Grid> {
        match self {
            Method::Glimpse => Ok(explain(bundle, engine, tokens)?.result.visual),
            Method::Baseline(kind) => baseline_map(bundle, *kind),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Glimpse => f.write_str("glimpse"),
            Method::Baseline(k) => k.fmt(f),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("glimpse") {
            Ok(Method::Glimpse)
        } else {
            s.parse().map(Method::Baseline)
        }
    }
}
