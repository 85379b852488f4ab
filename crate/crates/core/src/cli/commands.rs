use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write as _};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::settings::RunConfig;
use super::{Command, EXIT_INPUT, EXIT_OK};
use crate::baselines::BaselineKind;
use crate::error::{Error, Result};
use crate::explain::{explain, Method};
use crate::grid::Grid;
use crate::metrics::oracle::{
    serve_lines, serve_tcp, ConfidenceOracle, OracleEndpoint, SyntheticOracle, ORACLE_ENV,
};
use crate::metrics::{
    aggregate_corpus, alignment, load_corpus, perturbation_ranking, pool_human_map, run_curves, summarize,
    AlignmentScore, CorpusEntry, MetricSummary, PerturbationCurve, PerturbationMode,
};
use crate::saliency::{render, render_visual};
use crate::trace::{
    load_synth_sidecar, load_trace, save_trace, synth_corpus, synth_human_map, synth_trace, validate_trace,
    SynthSpec, TraceBundle, TraceDims, DEFAULT_ROW_TOL, SYNTH_SIDECAR,
};

/// Default truncation for `tmme-last-k` when `--last-k` is not given.
const DEFAULT_LAST_K: usize = 12;

pub(super) fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Explain {
            trace_dir,
            out,
            image,
            config,
        } => {
            let cfg = config.resolve()?;
            cmd_explain(&trace_dir, &out, image, &cfg)
        }
        Command::Baseline {
            trace_dir,
            kind,
            last_k,
            out,
            image,
            config,
        } => {
            let cfg = config.resolve()?;
            cmd_baseline(&trace_dir, &kind, last_k, &out, image, &cfg)
        }
        Command::EvalAlign {
            corpus,
            method,
            out,
            jobs,
            config,
            eval,
        } => {
            let mut cfg = config.resolve()?;
            eval.apply(&mut cfg);
            let method: Method = method.parse()?;
            with_pool(jobs, || cmd_eval_align(&corpus, method, &out, &cfg))
        }
        Command::EvalFaith {
            corpus,
            method,
            out,
            synthetic_oracle,
            jobs,
            config,
            eval,
        } => {
            let mut cfg = config.resolve()?;
            eval.apply(&mut cfg);
            let method: Method = method.parse()?;
            with_pool(jobs, || cmd_eval_faith(&corpus, method, &out, synthetic_oracle, &cfg))
        }
        Command::Synth {
            spec,
            out,
            human,
            pixels_per_cell,
        } => cmd_synth(&spec, &out, human.as_deref(), pixels_per_cell),
        Command::SynthCorpus {
            out,
            count,
            planted,
            seed,
            signal,
            layers,
            heads,
            visual,
            prompt,
            generated,
        } => {
            let dims = TraceDims::new(layers, heads, visual, prompt, generated);
            let base = SynthSpec::new(dims, Vec::new(), signal, seed);
            let entries = synth_corpus(&base, count, planted, &out)?;
            log::info!("wrote {} traces under {}", entries.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Validate { trace_dir, row_tol } => cmd_validate(&trace_dir, row_tol),
        Command::ServeOracle { corpus, listen, stdio } => cmd_serve_oracle(&corpus, listen.as_deref(), stdio),
    }
}

fn with_pool(jobs: Option<usize>, f: impl FnOnce() -> Result<i32> + Send) -> Result<i32> {
    match jobs {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    inputs: serde_json::Value,
    config: &'a RunConfig,
}

fn write_run_config(dir: &Path, command: &str, inputs: serde_json::Value, cfg: &RunConfig) -> Result<()> {
    let record = RunRecord {
        command,
        inputs,
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&record).expect("run record serializes");
    write_file(&dir.join("run_config.json"), json + "\n")
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Loads and validates; violations are logged and reported as `None`.
fn load_valid(trace_dir: &Path) -> Result<Option<TraceBundle>> {
    let bundle = load_trace(trace_dir)?;
    let report = validate_trace(&bundle, DEFAULT_ROW_TOL);
    if report.ok {
        return Ok(Some(bundle));
    }
    for v in &report.violations {
        log::error!("{} at {}: {}", v.code, v.location, v.message);
    }
    log::error!("trace {} failed validation", trace_dir.display());
    Ok(None)
}

/// The overlay image: explicit flag first, then the trace's own `image_path`.
fn overlay_image(flag: Option<PathBuf>, trace_dir: &Path, bundle: &TraceBundle) -> Option<PathBuf> {
    flag.or_else(|| bundle.image_path.as_ref().map(|p| trace_dir.join(p)))
}

fn cmd_explain(trace_dir: &Path, out: &Path, image: Option<PathBuf>, cfg: &RunConfig) -> Result<i32> {
    cfg.validate()?;
    let Some(bundle) = load_valid(trace_dir)? else {
        return Ok(EXIT_INPUT);
    };
    let explanation = explain(&bundle, &cfg.engine, &cfg.tokens)?;
    if explanation.table.degenerate {
        log::warn!("token weights degenerate; fell back to uniform weights");
    }
    let dir = out.join(&bundle.id);
    let image = overlay_image(image, trace_dir, &bundle);
    render(&explanation.render_input(&bundle), &cfg.render_options(image.clone()), &dir)?;
    let inputs = json!({
        "trace_dir": path_str(trace_dir),
        "out": path_str(out),
        "image": image.as_deref().map(path_str),
    });
    write_run_config(&dir, "explain", inputs, cfg)?;
    log::info!("wrote {}", dir.display());
    Ok(EXIT_OK)
}

fn cmd_baseline(
    trace_dir: &Path,
    kind: &str,
    last_k: Option<usize>,
    out: &Path,
    image: Option<PathBuf>,
    cfg: &RunConfig,
) -> Result<i32> {
    cfg.validate()?;
    let parsed = if kind.eq_ignore_ascii_case("all") {
        None
    } else {
        Some(kind.parse::<BaselineKind>()?)
    };
    let Some(bundle) = load_valid(trace_dir)? else {
        return Ok(EXIT_INPUT);
    };
    // An explicit --last-k is checked against the depth; the default shrinks to fit.
    let k = last_k.unwrap_or(DEFAULT_LAST_K.min(bundle.dims.layers));
    let kinds = match parsed {
        None => BaselineKind::all(k),
        Some(BaselineKind::TmmeVanilla) if last_k.is_some() => vec![BaselineKind::TmmeLastK(k)],
        Some(kind) => vec![kind],
    };
    let image = overlay_image(image, trace_dir, &bundle);
    let opts = cfg.render_options(image.clone());
    for k in kinds {
        let map = crate::baselines::baseline_map(&bundle, k)?;
        let dir = out.join(&bundle.id).join("baselines").join(k.dir_name());
        render_visual(&map, &opts, &dir)?;
        let inputs = json!({
            "trace_dir": path_str(trace_dir),
            "out": path_str(out),
            "kind": k.to_string(),
            "image": image.as_deref().map(path_str),
        });
        write_run_config(&dir, "baseline", inputs, cfg)?;
        log::info!("wrote {}", dir.display());
    }
    Ok(EXIT_OK)
}

fn load_entries(corpus: &Path) -> Result<Vec<CorpusEntry>> {
    let entries = load_corpus(corpus)?;
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!("corpus {} is empty", corpus.display())));
    }
    Ok(entries)
}

enum AlignOutcome {
    Scored(String, AlignmentScore),
    Skipped(PathBuf, String),
}

fn align_one(entry: &CorpusEntry, method: Method, cfg: &RunConfig) -> Result<AlignOutcome> {
    let skip = |reason: String| {
        log::warn!("skipping {}: {reason}", entry.trace_dir.display());
        Ok(AlignOutcome::Skipped(entry.trace_dir.clone(), reason))
    };
    let Some(human_path) = &entry.human_map_path else {
        return skip("no human map".into());
    };
    if !human_path.is_file() {
        return skip(format!("human map {} missing", human_path.display()));
    }
    let bundle = load_trace(&entry.trace_dir)?;
    let saliency = method.visual_map(&bundle, &cfg.engine, &cfg.tokens)?;
    let human = pool_human_map(&Grid::load(human_path)?, bundle.patch_grid)?;
    match alignment(&saliency, &human, cfg.eval.theta) {
        Ok(score) => Ok(AlignOutcome::Scored(bundle.id, score)),
        Err(e @ (Error::DegenerateSaliency | Error::DegenerateInput(_))) => skip(e.to_string()),
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct SkippedSample {
    trace_dir: String,
    reason: String,
}

#[derive(Serialize)]
struct AlignSummary {
    method: String,
    n: usize,
    skipped: Vec<SkippedSample>,
    nss: MetricSummary,
    spearman: MetricSummary,
    /// What the ± column means.
    spread: &'static str,
}

fn cmd_eval_align(corpus: &Path, method: Method, out: &Path, cfg: &RunConfig) -> Result<i32> {
    cfg.validate()?;
    let entries = load_entries(corpus)?;
    let outcomes = entries
        .par_iter()
        .map(|e| align_one(e, method, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("trace_id,nss,spearman\n");
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            AlignOutcome::Scored(id, s) => {
                let _ = writeln!(csv, "{id},{},{}", s.nss, s.spearman);
                scores.push(s);
            }
            AlignOutcome::Skipped(dir, reason) => skipped.push(SkippedSample {
                trace_dir: path_str(&dir),
                reason,
            }),
        }
    }
    let agg = aggregate_corpus(&scores);
    let summary = AlignSummary {
        method: method.to_string(),
        n: scores.len(),
        skipped,
        nss: agg.nss,
        spearman: agg.spearman,
        spread: "standard error of the mean",
    };
    write_file(&out.join("alignment.csv"), csv)?;
    write_file(
        &out.join("alignment_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    write_run_config(
        out,
        "eval-align",
        json!({"corpus": path_str(corpus), "out": path_str(out), "method": method.to_string()}),
        cfg,
    )?;
    if scores.is_empty() {
        log::error!("no sample could be scored");
        return Ok(EXIT_INPUT);
    }
    log::info!(
        "{method}: NSS {:.4} rho {:.4} over {} samples ({} skipped)",
        summary.nss.mean,
        summary.spearman.mean,
        summary.n,
        summary.skipped.len()
    );
    Ok(EXIT_OK)
}

/// In-process oracle for a corpus of synthetic traces (reads each `synth.json`).
pub fn synthetic_oracle_for(entries: &[CorpusEntry]) -> Result<SyntheticOracle> {
    let traces = entries
        .iter()
        .map(|e| {
            let spec = load_synth_sidecar(&e.trace_dir)?;
            Ok((spec.trace_id(), spec.dims.visual, spec.planted_patches))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticOracle::new(traces))
}

enum OracleSource {
    Synthetic(SyntheticOracle),
    Remote(OracleEndpoint, Duration),
}

impl OracleSource {
    fn open(&self) -> Result<Box<dyn ConfidenceOracle + Send>> {
        match self {
            OracleSource::Synthetic(o) => Ok(Box::new(o.clone())),
            OracleSource::Remote(ep, timeout) => ep.connect(*timeout),
        }
    }

    fn describe(&self) -> String {
        match self {
            OracleSource::Synthetic(_) => "synthetic".into(),
            OracleSource::Remote(OracleEndpoint::Tcp(a), _) => format!("tcp://{a}"),
            OracleSource::Remote(OracleEndpoint::Exec(c), _) => format!("exec:{c}"),
        }
    }
}

struct FaithSample {
    trace_id: String,
    curves: Vec<PerturbationCurve>,
}

fn faith_one(entry: &CorpusEntry, method: Method, source: &OracleSource, cfg: &RunConfig) -> Result<FaithSample> {
    let bundle = load_trace(&entry.trace_dir)?;
    let saliency = method.visual_map(&bundle, &cfg.engine, &cfg.tokens)?;
    let ranking = perturbation_ranking(&saliency);
    let mut oracle = source.open()?;
    let k = bundle.dims.visual;
    let e = &cfg.eval;
    let mut curves = run_curves(
        oracle.as_mut(),
        &bundle.id,
        k,
        &ranking,
        PerturbationMode::Deletion,
        &e.levels,
        e.step,
    )?;
    curves.extend(run_curves(
        oracle.as_mut(),
        &bundle.id,
        k,
        &ranking,
        PerturbationMode::Insertion,
        &e.levels,
        e.step,
    )?);
    Ok(FaithSample {
        trace_id: bundle.id,
        curves,
    })
}

#[derive(Serialize)]
struct LevelSummary {
    level: f64,
    auc: MetricSummary,
}

#[derive(Serialize)]
struct FaithSummary {
    method: String,
    oracle: String,
    n: usize,
    /// Lower is better.
    deletion: Vec<LevelSummary>,
    /// Higher is better.
    insertion: Vec<LevelSummary>,
    spread: &'static str,
}

fn cmd_eval_faith(corpus: &Path, method: Method, out: &Path, synthetic: bool, cfg: &RunConfig) -> Result<i32> {
    cfg.validate()?;
    let entries = load_entries(corpus)?;
    let source = if synthetic {
        OracleSource::Synthetic(synthetic_oracle_for(&entries)?)
    } else {
        let endpoint = cfg
            .eval
            .oracle
            .clone()
            .or_else(|| std::env::var(ORACLE_ENV).ok().filter(|s| !s.trim().is_empty()))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no oracle: pass --oracle, set {ORACLE_ENV}, or use --synthetic-oracle"
                ))
            })?;
        OracleSource::Remote(
            OracleEndpoint::parse(&endpoint)?,
            Duration::from_secs_f64(cfg.eval.oracle_timeout_secs),
        )
    };

    let samples = entries
        .par_iter()
        .map(|e| faith_one(e, method, &source, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut curves_csv = String::from("trace_id,mode,level,fraction,score\n");
    let mut auc_csv = String::from("trace_id,mode,level,auc\n");
    for s in &samples {
        for c in &s.curves {
            for (f, v) in c.fractions.iter().zip(&c.scores) {
                let _ = writeln!(curves_csv, "{},{},{},{f},{v}", s.trace_id, c.mode.as_str(), c.level);
            }
            let _ = writeln!(auc_csv, "{},{},{},{}", s.trace_id, c.mode.as_str(), c.level, c.auc);
        }
    }
    let per_level = |mode: PerturbationMode| -> Vec<LevelSummary> {
        cfg.eval
            .levels
            .iter()
            .map(|&level| {
                let aucs: Vec<f64> = samples
                    .iter()
                    .flat_map(|s| s.curves.iter())
                    .filter(|c| c.mode == mode && c.level == level)
                    .map(|c| c.auc)
                    .collect();
                LevelSummary {
                    level,
                    auc: summarize(&aucs),
                }
            })
            .collect()
    };
    let summary = FaithSummary {
        method: method.to_string(),
        oracle: source.describe(),
        n: samples.len(),
        deletion: per_level(PerturbationMode::Deletion),
        insertion: per_level(PerturbationMode::Insertion),
        spread: "standard error of the mean",
    };
    write_file(&out.join("curves.csv"), curves_csv)?;
    write_file(&out.join("auc.csv"), auc_csv)?;
    write_file(
        &out.join("faith_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    write_run_config(
        out,
        "eval-faith",
        json!({
            "corpus": path_str(corpus),
            "out": path_str(out),
            "method": method.to_string(),
            "oracle": source.describe(),
        }),
        cfg,
    )?;
    for (d, i) in summary.deletion.iter().zip(&summary.insertion) {
        log::info!(
            "{method} @ {:.0}%: deletion AUC {:.4}, insertion AUC {:.4}",
            d.level * 100.0,
            d.auc.mean,
            i.auc.mean
        );
    }
    Ok(EXIT_OK)
}

fn cmd_synth(spec_path: &Path, out: &Path, human: Option<&Path>, pixels_per_cell: usize) -> Result<i32> {
    if !spec_path.is_file() {
        return Err(Error::MissingFile(spec_path.to_path_buf()));
    }
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let corrupt = |reason: String| Error::InvalidSpec(format!("{}: {reason}", spec_path.display()));
    let spec: SynthSpec = if spec_path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| corrupt(e.to_string()))?
    } else {
        serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?
    };
    let bundle = synth_trace(&spec)?;
    save_trace(&bundle, out)?;
    let sidecar = serde_json::to_string_pretty(&spec).expect("spec serializes");
    write_file(&out.join(SYNTH_SIDECAR), sidecar)?;
    if let Some(h) = human {
        write_file(h, synth_human_map(&spec, pixels_per_cell)?.grid.to_csv())?;
    }
    log::info!("wrote trace {} to {}", bundle.id, out.display());
    Ok(EXIT_OK)
}

fn cmd_validate(trace_dir: &Path, row_tol: f64) -> Result<i32> {
    let bundle = load_trace(trace_dir)?;
    let report = validate_trace(&bundle, row_tol);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{json}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(if report.ok { EXIT_OK } else { EXIT_INPUT })
}

fn cmd_serve_oracle(corpus: &Path, listen: Option<&str>, stdio: bool) -> Result<i32> {
    let oracle = synthetic_oracle_for(&load_entries(corpus)?)?;
    if stdio {
        let stdin = std::io::stdin();
        serve_lines(&oracle, BufReader::new(stdin.lock()), std::io::stdout().lock())
            .map_err(|e| Error::io("<stdio>", e))?;
        return Ok(EXIT_OK);
    }
    let addr = listen.unwrap_or("127.0.0.1:7070");
    let listener = TcpListener::bind(addr).map_err(|e| Error::io(addr, e))?;
    let bound = listener.local_addr().map_err(|e| Error::io(addr, e))?;
    log::info!("synthetic oracle listening on {bound}");
    serve_tcp(oracle, listener).map_err(|e| Error::io(addr, e))?;
    Ok(EXIT_OK)
}
