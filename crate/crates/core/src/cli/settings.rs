//! Run configuration: defaults, overridden by a flat TOML file, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{EngineConfig, TokenConfig, UpdateRule};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_LEVELS;
use crate::saliency::RenderOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub blur_sigma: f64,
    pub overlay_opacity: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        let r = RenderOptions::default();
        Self {
            blur_sigma: r.blur_sigma,
            overlay_opacity: r.overlay_opacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Human-map percentile for NSS.
    pub theta: f64,
    pub levels: Vec<f64>,
    /// Patches per curve step; unset means about 20 steps per level.
    pub step: Option<usize>,
    pub oracle: Option<String>,
    pub oracle_timeout_secs: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            theta: 95.0,
            levels: DEFAULT_LEVELS.to_vec(),
            step: None,
            oracle: None,
            oracle_timeout_secs: 30.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub tokens: TokenConfig,
    pub render: RenderSettings,
    pub eval: EvalSettings,
}

const SECTIONS: [&str; 4] = ["engine", "tokens", "render", "eval"];
// Optional keys are absent from the serialized defaults.
const OPTIONAL_KEYS: [(&str, &str); 2] = [("eval", "step"), ("eval", "oracle")];

impl RunConfig {
    /// Parses a flat `key = value` file. Keys are unique across sections, so
    /// no section headers are needed; `[engine]`-style tables also work.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptManifest {
            path: origin.to_path_buf(),
            reason,
        };
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| corrupt(e.to_string()))?;
        let defaults = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut merged = toml::Table::new();
        for s in SECTIONS {
            merged.insert(s.to_string(), toml::Value::Table(toml::Table::new()));
        }
        let section_of = |key: &str| -> Option<&'static str> {
            SECTIONS.into_iter().find(|s| {
                defaults[*s].as_table().is_some_and(|t| t.contains_key(key))
                    || OPTIONAL_KEYS.contains(&(*s, key))
            })
        };
        let mut put = |section: &str, key: String, value: toml::Value| {
            merged[section].as_table_mut().expect("section table").insert(key, value);
        };
        for (key, value) in file {
            if let (Some(s), toml::Value::Table(inner)) = (SECTIONS.iter().find(|s| **s == key), &value) {
                for (k, v) in inner {
                    put(s, k.clone(), v.clone());
                }
                continue;
            }
            match section_of(&key) {
                Some(s) => put(s, key, value),
                None => return Err(corrupt(format!("unknown key {key:?}"))),
            }
        }
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| corrupt(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        self.tokens.validate()?;
        let e = &self.eval;
        if !(0.0..=100.0).contains(&e.theta) {
            return Err(Error::InvalidArgument(format!("theta must be in [0, 100], got {}", e.theta)));
        }
        if e.levels.is_empty() || e.levels.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
            return Err(Error::InvalidArgument(format!("levels must be in (0, 1], got {:?}", e.levels)));
        }
        if e.step == Some(0) {
            return Err(Error::InvalidArgument("step must be >= 1".into()));
        }
        if !(e.oracle_timeout_secs > 0.0 && e.oracle_timeout_secs.is_finite()) {
            return Err(Error::InvalidArgument("oracle timeout must be > 0".into()));
        }
        let r = &self.render;
        if !(r.blur_sigma >= 0.0) || !(0.0..=1.0).contains(&r.overlay_opacity) {
            return Err(Error::InvalidArgument(format!(
                "blur_sigma must be >= 0 and overlay_opacity in [0, 1], got {} / {}",
                r.blur_sigma, r.overlay_opacity
            )));
        }
        Ok(())
    }

    pub fn render_options(&self, image: Option<PathBuf>) -> RenderOptions {
        RenderOptions {
            blur_sigma: self.render.blur_sigma,
            overlay_opacity: self.render.overlay_opacity,
            image,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// Flat TOML config file; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub fusion_temperature: Option<f64>,
    #[arg(long)]
    pub depth_temperature: Option<f64>,
    /// Fraction of deepest layers to propagate through.
    #[arg(long)]
    pub layer_fraction: Option<f64>,
    #[arg(long, value_parser = ["additive", "literal"])]
    pub update_rule: Option<String>,
    #[arg(long)]
    pub no_depth_prior: bool,
    #[arg(long)]
    pub no_layer_relevance: bool,
    #[arg(long)]
    pub no_head_weighting: bool,
    #[arg(long)]
    pub no_token_confidence: bool,
    #[arg(long)]
    pub no_prompt_weighting: bool,
    #[arg(long)]
    pub flow_strength: Option<f64>,
    #[arg(long)]
    pub flow_all_pairs: bool,
    #[arg(long)]
    pub no_flow: bool,
    #[arg(long)]
    pub drop_punctuation: bool,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    #[arg(long)]
    pub overlay_opacity: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalFlags {
    /// NSS human-map percentile.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Comma-separated perturbation levels, e.g. 0.05,0.15,0.30.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Patches per curve step.
    #[arg(long)]
    pub step: Option<usize>,
    /// Oracle endpoint: host:port, tcp://host:port or exec:<command>.
    #[arg(long)]
    pub oracle: Option<String>,
    #[arg(long, value_name = "SECS")]
    pub oracle_timeout: Option<f64>,
}

impl ConfigFlags {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let e = &mut cfg.engine;
        if let Some(v) = self.fusion_temperature {
            e.fusion_temperature = v;
        }
        if let Some(v) = self.depth_temperature {
            e.depth_temperature = v;
        }
        if let Some(v) = self.layer_fraction {
            e.layer_fraction = v;
        }
        match self.update_rule.as_deref() {
            Some("literal") => e.update_rule = UpdateRule::Literal,
            Some(_) => e.update_rule = UpdateRule::Additive,
            None => {}
        }
        e.use_depth_prior &= !self.no_depth_prior;
        e.use_layer_relevance &= !self.no_layer_relevance;
        e.use_head_weighting &= !self.no_head_weighting;
        let t = &mut cfg.tokens;
        t.use_token_confidence &= !self.no_token_confidence;
        t.use_prompt_weighting &= !self.no_prompt_weighting;
        t.apply_flow &= !self.no_flow;
        t.flow_all_pairs |= self.flow_all_pairs;
        t.drop_punctuation |= self.drop_punctuation;
        if let Some(v) = self.flow_strength {
            t.flow_strength = v;
        }
        if let Some(v) = self.blur_sigma {
            cfg.render.blur_sigma = v;
        }
        if let Some(v) = self.overlay_opacity {
            cfg.render.overlay_opacity = v;
        }
        Ok(cfg)
    }
}

impl EvalFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let e = &mut cfg.eval;
        if let Some(v) = self.theta {
            e.theta = v;
        }
        if let Some(v) = &self.levels {
            e.levels = v.clone();
        }
        if self.step.is_some() {
            e.step = self.step;
        }
        if self.oracle.is_some() {
            e.oracle = self.oracle.clone();
        }
        if let Some(v) = self.oracle_timeout {
            e.oracle_timeout_secs = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Probe {
        #[command(flatten)]
        eval: EvalFlags,
        rest: Option<String>,
    }

    #[test]
    fn levels_flag_is_comma_separated() {
        let p = Probe::try_parse_from(["x", "--levels", "0.05,0.3", "corpus.json"]).unwrap();
        assert_eq!(p.eval.levels, Some(vec![0.05, 0.3]));
        assert_eq!(p.rest.as_deref(), Some("corpus.json"));
        assert!(Probe::try_parse_from(["x", "--levels", "0.1,hot"]).is_err());
    }

    #[test]
    fn flat_file_routes_keys_to_sections() {
        let cfg = RunConfig::from_toml(
            "fusion_temperature = 0.25\nuse_depth_prior = false\nflow_strength = 0.0\nblur_sigma = 1.5\nlevels = [0.1]\nstep = 2\noracle = \"127.0.0.1:7000\"\n",
            Path::new("x.toml"),
        )
        .unwrap();
        assert_eq!(cfg.engine.fusion_temperature, 0.25);
        assert!(!cfg.engine.use_depth_prior);
        assert_eq!(cfg.tokens.flow_strength, 0.0);
        assert_eq!(cfg.render.blur_sigma, 1.5);
        assert_eq!(cfg.eval.levels, vec![0.1]);
        assert_eq!(cfg.eval.step, Some(2));
        assert_eq!(cfg.eval.oracle.as_deref(), Some("127.0.0.1:7000"));
        assert_eq!(cfg.engine.depth_temperature, 0.2);
    }

    #[test]
    fn sectioned_file_and_errors() {
        let cfg = RunConfig::from_toml("[engine]\nupdate_rule = \"literal\"\n", Path::new("x")).unwrap();
        assert_eq!(cfg.engine.update_rule, UpdateRule::Literal);
        assert!(RunConfig::from_toml("bogus = 1\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("fusion_temperature = \"hot\"\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("= =\n", Path::new("x")).is_err());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "fusion_temperature = 0.25\ndepth_temperature = 0.4\n").unwrap();
        let flags = ConfigFlags {
            config: Some(p),
            fusion_temperature: Some(0.75),
            no_token_confidence: true,
            ..Default::default()
        };
        let cfg = flags.resolve().unwrap();
        assert_eq!(cfg.engine.fusion_temperature, 0.75);
        assert_eq!(cfg.engine.depth_temperature, 0.4);
        assert_eq!(cfg.engine.layer_fraction, 1.0);
        assert!(!cfg.tokens.use_token_confidence);
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.eval.levels = vec![0.0];
        assert!(cfg.validate().is_err());
        cfg.eval.levels = vec![0.1];
        cfg.eval.theta = 101.0;
        assert!(cfg.validate().is_err());
    }
}
