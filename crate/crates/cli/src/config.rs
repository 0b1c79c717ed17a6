//! Run configuration for `pyramid train`.
//!
//! ```toml
//! output = "runs/mp"
//! profile = "ag_news"          # optional, sets plan.epochs
//!
//! [corpus]
//! path = "train.jsonl"
//! format = "jsonl"             # optional, inferred from the extension
//!
//! [model]
//! layers = 4
//! hidden = 32
//! heads = 4
//! ffn = 128
//! classes = 4
//! vocab = 200
//! max_len = 128
//!
//! [plan]
//! preset = "mp"
//! learning_rate = 1e-3
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pyramid::corpus::CorpusFormat;
use pyramid::encoder::ModelConfig;
use pyramid::pipeline::{make_plan, DatasetProfile, TrainPlan};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<CorpusFormat>,
}

impl CorpusSource {
    pub fn resolved_format(&self) -> Result<CorpusFormat> {
        match self.format.or_else(|| CorpusFormat::from_path(&self.path)) {
            Some(f) => Ok(f),
            None => bail!("cannot tell the format of {}; set corpus.format", self.path.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<DatasetProfile>,
    pub corpus: CorpusSource,
    pub model: ModelConfig,
    #[serde(default)]
    pub plan: TrainPlan,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output = base.join(&cfg.output);
        cfg.corpus.path = base.join(&cfg.corpus.path);
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Applies the profile, drops stages the preset skips, fixes the format
    /// and validates everything.
    pub fn resolve(&mut self) -> Result<()> {
        let epochs = self.profile.take().map_or(self.plan.epochs, DatasetProfile::epochs);
        self.plan.epochs = make_plan(self.plan.preset, epochs).epochs;
        self.corpus.format = Some(self.corpus.resolved_format()?);
        self.model.validate()?;
        self.plan.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
