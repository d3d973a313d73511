use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use kgr_core::degreembed::HyperParams;
use kgr_core::rulemine::MIN_NORMALIZED;
use serde::Deserialize;

/// Everything a command may need. Loaded from TOML, then patched by flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub threads: Option<usize>,
    pub model: HyperParams,
    pub eval: EvalConfig,
    pub rules: RulesConfig,
    pub saturation: SaturationConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RulesConfig {
    pub top_n: usize,
    pub min_normalized: f64,
    /// Head relations to report; empty means every base relation.
    pub heads: Vec<String>,
}

impl Default for RulesConfig {
    fn default() -> Self {
        Self {
            top_n: 10,
            min_normalized: MIN_NORMALIZED,
            heads: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaturationConfig {
    pub max_len: usize,
    pub include_unary: bool,
    pub top_n: Option<usize>,
    pub heads: Vec<String>,
}

impl Default for SaturationConfig {
    fn default() -> Self {
        Self {
            max_len: 2,
            include_unary: false,
            top_n: None,
            heads: Vec::new(),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Dataset directory holding facts/train/valid/test.txt
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output directory for logs and reports
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Checkpoint file (default: OUT/model.ckpt)
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    /// TOML run configuration
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads (falls back to KGR_THREADS, then all cores)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Add inverse relations as extra operators and queries
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    pub inverse: Option<bool>,
    /// Maximum rule length
    #[arg(long = "L", value_name = "N")]
    pub rule_len: Option<usize>,
    /// Rank of the attention approximation
    #[arg(long = "T", value_name = "N")]
    pub rank: Option<usize>,
    #[arg(long, value_name = "F")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub patience: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load(args: &CommonArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(args);
        Ok(cfg)
    }

    pub fn apply(&mut self, a: &CommonArgs) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        if a.data.is_some() {
            self.data = a.data.clone();
        }
        if a.out.is_some() {
            self.out = a.out.clone();
        }
        if a.ckpt.is_some() {
            self.ckpt = a.ckpt.clone();
        }
        if a.threads.is_some() {
            self.threads = a.threads;
        }
        let m = &mut self.model;
        set(&mut m.seed, &a.seed);
        set(&mut m.inverse, &a.inverse);
        set(&mut m.rule_len, &a.rule_len);
        set(&mut m.rank, &a.rank);
        set(&mut m.lr, &a.lr);
        set(&mut m.batch, &a.batch);
        set(&mut m.max_epochs, &a.epochs);
        set(&mut m.patience, &a.patience);
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn ckpt_path(&self) -> PathBuf {
        self.ckpt
            .clone()
            .unwrap_or_else(|| self.out_dir().join("model.ckpt"))
    }

    /// Flag, then config, then `KGR_THREADS`.
    pub fn thread_count(&self) -> Result<Option<usize>> {
        if let Some(n) = self.threads {
            return Ok(Some(n));
        }
        match std::env::var("KGR_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .with_context(|| format!("KGR_THREADS={v:?} is not a thread count")),
            Err(_) => Ok(None),
        }
    }
}
