//! Experiment configuration (TOML) and run-directory layout.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use ipa_transfer::frontend::LogMelConfig;
use ipa_transfer::model::ArchConfig;
use ipa_transfer::training::TrainConfig;
use ipa_transfer::transfer::{ADAPT_EPOCHS, ADAPT_LR};
use ipa_transfer::viz::TsneConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguagePaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub lexicon: PathBuf,
    pub rules: PathBuf,
    /// `rules`, `error` or `skip`.
    #[serde(default = "default_oov")]
    pub oov: String,
}

fn default_oov() -> String {
    "rules".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSettings {
    pub lr: f64,
    pub epochs: usize,
    /// Batch budget in input frames; the pretraining budget when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_frames: Option<usize>,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        Self { lr: ADAPT_LR, epochs: ADAPT_EPOCHS, batch_frames: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeSettings {
    pub target_size: usize,
}

impl Default for BpeSettings {
    fn default() -> Self {
        Self { target_size: ipa_transfer::bpe::DEFAULT_TARGET_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub beam: usize,
    pub max_len_ratio: f64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self { beam: 10, max_len_ratio: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSettings {
    pub n_per_lang: usize,
    pub seed: u64,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        Self { n_per_lang: 1000, seed: 0 }
    }
}

/// Everything a run needs. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_runs")]
    pub runs_dir: PathBuf,
    /// Languages pooled for IPA pretraining.
    pub pretrain_languages: Vec<String>,
    #[serde(default)]
    pub frontend: LogMelConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub pretrain: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptSettings,
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub bpe: BpeSettings,
    #[serde(default)]
    pub decode: DecodeSettings,
    #[serde(default)]
    pub embed: EmbedSettings,
    #[serde(default)]
    pub tsne: TsneConfig,
    pub languages: BTreeMap<String, LanguagePaths>,
}

fn default_runs() -> PathBuf {
    PathBuf::from("runs")
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Parses, resolves paths against the file's directory and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.runs_dir = resolve(base, &cfg.runs_dir);
        for l in cfg.languages.values_mut() {
            for p in [&mut l.train, &mut l.dev, &mut l.lexicon, &mut l.rules] {
                *p = resolve(base, p);
            }
            if let Some(t) = &mut l.test {
                *t = resolve(base, t);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("invalid experiment name {:?}", self.name));
        }
        if self.pretrain_languages.is_empty() {
            return bad("pretrain_languages is empty".into());
        }
        for l in &self.pretrain_languages {
            if !self.languages.contains_key(l) {
                return bad(format!("pretrain language {l:?} has no [languages.{l}] entry"));
            }
        }
        for (code, l) in &self.languages {
            let paths = [Some(&l.train), Some(&l.dev), l.test.as_ref(), Some(&l.lexicon), Some(&l.rules)];
            for p in paths.into_iter().flatten() {
                if !p.exists() {
                    return bad(format!("language {code}: {} does not exist", p.display()));
                }
            }
            l.oov.parse::<ipa_transfer::g2p::OovPolicy>().map_err(CliError::Config)?;
        }
        self.frontend.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pretrain.validate().map_err(|e| CliError::Config(format!("pretrain: {e}")))?;
        self.finetune.validate().map_err(|e| CliError::Config(format!("finetune: {e}")))?;
        if self.adapt.batch_frames == Some(0) || self.adapt.epochs == 0 || !(self.adapt.lr > 0.0) {
            return bad("adapt needs positive lr, epochs and batch_frames".into());
        }
        if self.decode.beam == 0 {
            return bad("decode.beam must be at least 1".into());
        }
        Ok(())
    }

    pub fn language(&self, code: &str) -> Result<&LanguagePaths, CliError> {
        self.languages.get(code).ok_or_else(|| CliError::Config(format!("unknown language {code:?}")))
    }

    pub fn run_root(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.run_root().join(stage)
    }
}

/// Exclusive claim on a stage directory, released on drop.
pub struct StageLock {
    path: PathBuf,
}

impl StageLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Io(format!(
                "{} is locked by another run (remove {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// What a stage ran with, written next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Effective training settings of this stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub experiment: ExperimentConfig,
}

impl Snapshot {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Config(format!("snapshot: {e}")))?;
        std::fs::write(dir.join("config.snapshot"), text)?;
        Ok(())
    }
}
