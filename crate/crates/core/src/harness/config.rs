//! Run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::association::AssociationConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::gather::GatherModelConfig;
use crate::trace::{BiasMode, TraceModelConfig};

/// Where the tracer's instance transcriptions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatherSource {
    Learned,
    Oracle,
    Random,
    Max,
}

impl GatherSource {
    pub const ALL: [GatherSource; 4] = [
        GatherSource::Learned,
        GatherSource::Oracle,
        GatherSource::Random,
        GatherSource::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GatherSource::Learned => "learned",
            GatherSource::Oracle => "oracle",
            GatherSource::Random => "random",
            GatherSource::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gather source {s:?}")))
    }
}

/// AdamW with linear warmup and cosine decay to a tenth of the peak rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 32,
            warmup_steps: 100,
            grad_clip: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` of `total`.
    pub fn rate_at(&self, step: usize, total: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        peak * (0.1 + 0.9 * cosine)
    }
}

/// Everything a pipeline run depends on.
///
/// The `*_config` paths, when set, replace the matching inline section and
/// are resolved relative to the run config's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub gather_source: GatherSource,
    pub trace_bias: BiasMode,
    pub corpus_config: Option<PathBuf>,
    pub gather_config: Option<PathBuf>,
    pub trace_config: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub association: AssociationConfig,
    pub gather: GatherModelConfig,
    pub trace: TraceModelConfig,
    pub gather_optimizer: OptimizerConfig,
    pub trace_optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 2000,
            val_fraction: 0.1,
            test_fraction: 0.1,
            gather_source: GatherSource::Learned,
            trace_bias: BiasMode::Full,
            corpus_config: None,
            gather_config: None,
            trace_config: None,
            corpus: CorpusConfig::default(),
            association: AssociationConfig::default(),
            gather: GatherModelConfig::default(),
            trace: TraceModelConfig::default(),
            gather_optimizer: OptimizerConfig {
                epochs: 12,
                ..OptimizerConfig::default()
            },
            trace_optimizer: OptimizerConfig {
                epochs: 20,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl RunConfig {
    /// Reads a run config and inlines any referenced section files.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = crate::config::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base)?;
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) -> Result<()> {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        if let Some(p) = self.corpus_config.take() {
            self.corpus = crate::config::load(&join(&p))?;
        }
        if let Some(p) = self.gather_config.take() {
            self.gather = crate::config::load(&join(&p))?;
        }
        if let Some(p) = self.trace_config.take() {
            self.trace = crate::config::load(&join(&p))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.association.validate()?;
        self.gather.validate()?;
        self.trace.validate()?;
        self.gather_optimizer.validate()?;
        self.trace_optimizer.validate()?;
        let fractions_ok = (0.0..1.0).contains(&self.val_fraction)
            && (0.0..1.0).contains(&self.test_fraction)
            && self.val_fraction + self.test_fraction < 1.0;
        if !fractions_ok {
            return Err(Error::Config(format!(
                "val_fraction {} and test_fraction {} must be in [0, 1) and sum below 1",
                self.val_fraction, self.test_fraction
            )));
        }
        if self.num_videos == 0 {
            return Err(Error::Config("num_videos must be positive".into()));
        }
        if self.gather.visual_dim != self.corpus.visual_dim {
            return Err(Error::Config(format!(
                "gather visual_dim {} differs from corpus visual_dim {}",
                self.gather.visual_dim, self.corpus.visual_dim
            )));
        }
        if self.gather.max_text_len < self.corpus.max_text_len {
            return Err(Error::Config(format!(
                "gather max_text_len {} is shorter than corpus texts ({})",
                self.gather.max_text_len, self.corpus.max_text_len
            )));
        }
        if self.gather.charset != self.trace.charset {
            return Err(Error::Config("gather and trace must share one charset".into()));
        }
        Ok(())
    }

    pub fn with_flags(&self, gather_source: GatherSource, trace_bias: BiasMode) -> Self {
        Self {
            gather_source,
            trace_bias,
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let text = serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

/// Stable per-purpose seed derived from the run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(purpose.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = crate::config::to_string(&cfg).unwrap();
        let back: RunConfig = crate::config::parse(&text, Path::new("run.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = crate::config::parse::<RunConfig>("sed = 3\n", Path::new("run.toml")).unwrap_err();
        assert!(err.is_config(), "{err}");
    }

    #[test]
    fn hash_tracks_flags() {
        let cfg = RunConfig::default();
        let other = cfg.with_flags(GatherSource::Max, BiasMode::Full);
        assert_ne!(cfg.hash().unwrap(), other.hash().unwrap());
    }

    #[test]
    fn section_files_are_inlined() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("corpus.toml"), "max_instances = 3\n").unwrap();
        std::fs::write(dir.path().join("run.toml"), "corpus_config = \"corpus.toml\"\nseed = 9\n").unwrap();
        let cfg = RunConfig::load(&dir.path().join("run.toml")).unwrap();
        assert_eq!(cfg.corpus.max_instances, 3);
        assert_eq!(cfg.seed, 9);
        assert!(cfg.corpus_config.is_none());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let o = OptimizerConfig {
            warmup_steps: 10,
            ..OptimizerConfig::default()
        };
        assert!(o.rate_at(0, 100) < o.rate_at(9, 100));
        assert!((o.rate_at(9, 100) - o.learning_rate).abs() < 1e-12);
        assert!((o.rate_at(100, 100) - 0.1 * o.learning_rate).abs() < 1e-12);
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
    }

    #[test]
    fn mismatched_sections_rejected() {
        let mut cfg = RunConfig::default();
        cfg.gather.visual_dim = 3;
        assert!(cfg.validate().unwrap_err().is_config());
    }
}
