//! Experiment configuration: flat `key = value` lines under `[section]`
//! headers. `#` and `;` start comments.
//!
//! ```text
//! [split]
//! mode = U_DACZSL
//! num_classes = 12
//!
//! [run]
//! seeds = 0, 1, 2
//! ```
//!
//! `split.mode` and `run.seeds` are required; every other key has a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ablation::Ablation;
use crate::data::SplitConfig;
use crate::error::{DinError, Result};
use crate::evaluation::EvalConfig;
use crate::losses::LossWeights;
use crate::metrics::MetricOptions;
use crate::model::{ModelConfig, Placement, PromptInit};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub k_list: Vec<usize>,
    pub variants: Vec<PromptInit>,
    pub placements: Vec<Placement>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_list: vec![1, 2, 4, 8, 16],
            variants: vec![PromptInit::Glp, PromptInit::Cwp],
            placements: vec![Placement::End, Placement::Mid],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub metrics: MetricOptions,
    pub sweep: SweepConfig,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            ablation: Ablation::default(),
            metrics: MetricOptions::default(),
            sweep: SweepConfig::default(),
            seeds: vec![0],
            out_dir: None,
        }
    }
}

const REQUIRED: [&str; 2] = ["split.mode", "run.seeds"];

/// Raw `section.key → (value, line)` entries of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    pub source: String,
    pub entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| DinError::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut section: Option<String> = None;
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(lineno, format!("unterminated section header '{line}'")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(lineno, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(lineno, format!("expected key = value, found '{line}'")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| err(lineno, "key outside of any [section]".into()))?;
            let full = format!("{sec}.{}", key.trim());
            if entries.insert(full.clone(), (value.trim().to_string(), lineno)).is_some() {
                return Err(err(lineno, format!("duplicate key '{full}'")));
            }
        }
        Ok(Self {
            source: source.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DinError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies a `section.key=value` override, replacing any file value.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| DinError::Config(format!("override '{spec}' is not section.key=value")))?;
        let key = key.trim();
        if !key.contains('.') {
            return Err(DinError::Config(format!("override key '{key}' must be section-qualified")));
        }
        self.entries.insert(key.to_string(), (value.trim().to_string(), 0));
        Ok(())
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        for key in REQUIRED {
            if !self.entries.contains_key(key) {
                return Err(DinError::Config(format!("missing required field '{key}' in {}", self.source)));
            }
        }
        let mut cfg = ExperimentConfig::default();
        // preset first so individual flags refine it
        if let Some((v, line)) = self.entries.get("ablation.preset") {
            cfg.ablation = Ablation::preset(v).map_err(|e| self.located("ablation.preset", *line, e))?;
        }
        for (key, (value, line)) in &self.entries {
            if key == "ablation.preset" {
                continue;
            }
            apply(&mut cfg, key, value).map_err(|e| self.located(key, *line, e))?;
        }
        validate(&cfg)?;
        Ok(cfg)
    }

    fn located(&self, key: &str, line: usize, e: DinError) -> DinError {
        let msg = match e {
            DinError::Config(m) => m,
            other => other.to_string(),
        };
        if line == 0 {
            DinError::Config(format!("override {key}: {msg}"))
        } else {
            DinError::Parse {
                path: self.source.clone(),
                line,
                msg: format!("{key}: {msg}"),
            }
        }
    }
}

const SECTIONS: [&str; 8] = ["split", "model", "train", "eval", "loss", "ablation", "run", "sweep"];

fn parse<T: FromStr>(value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DinError::Config(format!("cannot parse '{value}'")))
}

fn parse_bool(value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(DinError::Config(format!("expected a boolean, found '{value}'"))),
    }
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| DinError::Config(format!("cannot parse list item '{s}'"))))
        .collect()
}

fn apply(cfg: &mut ExperimentConfig, key: &str, v: &str) -> Result<()> {
    let s = &mut cfg.split;
    let m = &mut cfg.model;
    let t = &mut cfg.train;
    let l = &mut cfg.loss;
    let a = &mut cfg.ablation;
    match key {
        "split.mode" => s.mode = v.parse()?,
        "split.num_domains" => s.num_domains = parse(v)?,
        "split.num_classes" => s.num_classes = parse(v)?,
        "split.num_tasks" => s.num_tasks = parse(v)?,
        "split.target_domain" => s.target_domain = parse(v)?,
        "split.classes_per_task" => s.classes_per_task = Some(parse(v)?),
        "split.feature_dim" => s.feature_dim = parse(v)?,
        "split.semantic_dim" => s.semantic_dim = parse(v)?,
        "split.latent_dim" => s.latent_dim = parse(v)?,
        "split.domain_shift_strength" => s.domain_shift_strength = parse(v)?,
        "split.class_separation" => s.class_separation = parse(v)?,
        "split.noise_std" => s.noise_std = parse(v)?,
        "split.examples_per_cell" => s.examples_per_cell = parse(v)?,
        "split.semantic_correlation" => s.semantic_correlation = parse(v)?,
        "split.semantic_kind" => s.semantic_kind = v.parse()?,
        "split.dropped_domains_per_task" => s.dropped_domains_per_task = parse(v)?,
        "split.train_fraction" => s.train_fraction = parse(v)?,

        "model.embed_dim" => m.embed_dim = parse(v)?,
        "model.hidden_dim" => m.hidden_dim = parse(v)?,
        "model.text_hidden_dim" => m.text_hidden_dim = parse(v)?,
        "model.prompt_length" => m.prompt_length = parse(v)?,
        "model.dim_per_token" => m.dim_per_token = parse(v)?,
        "model.disc_hidden_dim" => m.disc_hidden_dim = parse(v)?,
        "model.leaky_slope" => m.leaky_slope = parse(v)?,
        "model.prompt_init_std" => m.prompt_init_std = parse(v)?,

        "train.k_shot" => t.k_shot = parse(v)?,
        "train.buffer_per_class" => t.buffer_per_class = parse(v)?,
        "train.batch_size" => t.batch_size = parse(v)?,
        "train.prompt_epochs" => t.prompt_epochs = Some(parse(v)?),
        "train.prompt_epoch_scale" => t.prompt_epoch_scale = parse(v)?,
        "train.main_epochs" => t.main_epochs = parse(v)?,
        "train.disc_steps" => t.disc_steps = parse(v)?,
        "train.lr_prompt" => t.lr_prompt = parse(v)?,
        "train.lr_encoders" => t.lr_encoders = parse(v)?,
        "train.lr_disc" => t.lr_disc = parse(v)?,
        "train.wd_prompt" => t.wd_prompt = parse(v)?,
        "train.wd_encoders" => t.wd_encoders = parse(v)?,
        "train.wd_disc" => t.wd_disc = parse(v)?,
        "train.warmup_epochs" => t.warmup_epochs = parse(v)?,
        "train.buffer_per_epoch" => t.buffer_per_epoch = parse_bool(v)?,

        "eval.pool" => t.eval.pool = v.parse()?,
        "eval.unseen_path" => t.eval.unseen_path = v.parse()?,
        "eval.gamma_points" => t.eval.gamma_points = parse(v)?,
        "eval.raw_inner_sums" => cfg.metrics.raw_inner_sums = parse_bool(v)?,
        "eval.raw_bwt" => cfg.metrics.raw_bwt = parse_bool(v)?,

        "loss.lambda_disen" => l.lambda_disen = parse(v)?,
        "loss.lambda_adv" => l.lambda_adv = parse(v)?,
        "loss.lambda_cont" => l.lambda_cont = parse(v)?,
        "loss.alpha" => l.alpha = parse(v)?,
        "loss.beta" => l.beta = parse(v)?,
        "loss.tau" => l.tau = parse(v)?,
        "loss.lambda_grl" => l.lambda_grl = parse(v)?,

        "ablation.use_local" => a.use_local = parse_bool(v)?,
        "ablation.use_domain_disc" => a.use_domain_disc = parse_bool(v)?,
        "ablation.use_task_disc" => a.use_task_disc = parse_bool(v)?,
        "ablation.use_disen" => a.use_disen = parse_bool(v)?,
        "ablation.use_buffer" => a.use_buffer = parse_bool(v)?,
        "ablation.use_prompt_stage" => a.use_prompt_stage = parse_bool(v)?,
        "ablation.train" => a.train = parse_bool(v)?,
        "ablation.name" => a.name = v.to_string(),
        "ablation.prompt_init" => m.prompt_init = v.parse()?,
        "ablation.prompt_placement" => m.placement = v.parse()?,

        "run.seeds" => cfg.seeds = parse_list(v)?,
        "run.out_dir" => cfg.out_dir = Some(PathBuf::from(v)),

        "sweep.k_list" => cfg.sweep.k_list = parse_list(v)?,
        "sweep.variants" => cfg.sweep.variants = parse_list(v)?,
        "sweep.placements" => cfg.sweep.placements = parse_list(v)?,
        other => return Err(DinError::Config(format!("unknown key '{other}'"))),
    }
    Ok(())
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.split.validate()?;
    cfg.train.validate()?;
    cfg.loss.validate()?;
    ModelConfig {
        num_classes: cfg.split.num_classes,
        ..cfg.model.clone()
    }
    .validate()?;
    if cfg.seeds.is_empty() {
        return Err(DinError::Config("run.seeds must list at least one seed".into()));
    }
    let mut seen = cfg.seeds.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != cfg.seeds.len() {
        return Err(DinError::Config("run.seeds contains duplicates".into()));
    }
    if cfg.sweep.k_list.iter().any(|&k| k == 0) {
        return Err(DinError::Config("sweep.k_list entries must be positive".into()));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::load(path)?;
        for o in overrides {
            raw.set_override(o)?;
        }
        raw.build()
    }

    pub fn eval(&self) -> &EvalConfig {
        &self.train.eval
    }

    /// Copies of the split, model and train configs carrying `seed`.
    pub fn seeded(&self, seed: u64) -> (SplitConfig, ModelConfig, TrainConfig) {
        (
            SplitConfig {
                seed,
                ..self.split.clone()
            },
            ModelConfig {
                seed,
                ..self.model.clone()
            },
            TrainConfig {
                seed,
                ..self.train.clone()
            },
        )
    }
}
