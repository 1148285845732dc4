//! The staged pipeline: multilingual IPA pretraining, optional target
//! adaptation, then target finetuning with the encoder kept and the decoder
//! reinitialized. The monolingual baseline shares the finetuning recipe and
//! differs only in where the encoder comes from.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::frontend::{LogMelConfig, Utterance};
use crate::g2p::Converter;
use crate::model::{init_params, is_encoder_param, reinit_where, ArchConfig, ModelError};
use crate::phoneset::{build_inventory, parse_ipa, PhonesetError, SymbolTable, VocabKind, Vocabulary};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::training::{train_loop, Example, MetricRecord, TrainConfig, TrainingError};

pub const ADAPT_LR: f64 = 5e-5;
pub const ADAPT_EPOCHS: usize = 2;

/// Scaled-down settings for the synthetic three-language corpus on one CPU
/// core. Adaptation keeps [`ADAPT_LR`] and [`ADAPT_EPOCHS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskRecipe {
    pub arch: ArchConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Batch budget during adaptation, in input frames.
    pub adapt_batch_frames: usize,
    pub bpe_size: usize,
    pub beam: usize,
}

impl DeskRecipe {
    pub fn synthetic() -> Self {
        Self {
            arch: ArchConfig { dropout_p: 0.1, ..ArchConfig::desk() },
            pretrain: TrainConfig { epochs: 10, average_last: 3, warmup_steps: 500, batch_frames: 2000, ..TrainConfig::default() },
            finetune: TrainConfig { epochs: 60, average_last: 5, warmup_steps: 100, batch_frames: 800, ..TrainConfig::default() },
            adapt_batch_frames: 1,
            bpe_size: 30,
            beam: 4,
        }
    }

    /// Base settings handed to [`adapt_ipa_model`].
    pub fn adapt_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { batch_frames: self.adapt_batch_frames, seed, ..self.pretrain.clone() }
    }
}

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("target transcripts use symbols missing from the parent vocabulary: {}", .0.join(" "))]
    VocabMissingSymbols(Vec<String>),
    #[error("{stage} cannot follow {found:?}")]
    WrongParentStage { stage: &'static str, found: Vec<String> },
    #[error("bad stage config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Phoneset(#[from] PhonesetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("utterance {id}: {msg}")]
    Data { id: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainIpa,
    Adapt,
    Finetune,
    MonolingualBaseline,
}

impl Stage {
    /// Prefix of the provenance entry this stage appends.
    pub fn tag(self) -> &'static str {
        match self {
            Stage::PretrainIpa => "pretrain_ipa",
            Stage::Adapt => "adapted",
            Stage::Finetune => "finetune",
            Stage::MonolingualBaseline => "baseline",
        }
    }

    fn of_entry(entry: &str) -> Option<Stage> {
        let tag = entry.split(':').next()?;
        [Stage::PretrainIpa, Stage::Adapt, Stage::Finetune, Stage::MonolingualBaseline].into_iter().find(|s| s.tag() == tag)
    }
}

/// One stage of an experiment as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    #[serde(default)]
    pub languages: Vec<String>,
    #[serde(default)]
    pub parent_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub target_language: Option<String>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), TransferError> {
        let bad = |m: &str| Err(TransferError::BadConfig(m.to_string()));
        match self.stage {
            Stage::PretrainIpa if self.languages.is_empty() => return bad("pretraining needs at least one language"),
            Stage::Adapt | Stage::Finetune if self.parent_checkpoint.is_none() => {
                return bad("adaptation and finetuning need a parent checkpoint")
            }
            Stage::Adapt | Stage::Finetune | Stage::MonolingualBaseline if self.target_language.is_none() => {
                return bad("a target language is required")
            }
            _ => {}
        }
        self.train.validate().map_err(TransferError::from)
    }
}

/// Checks that a provenance chain lists stages in a legal order:
/// `pretrain_ipa [adapted] [finetune]` or a lone `baseline`.
pub fn check_provenance(chain: &[String]) -> Result<(), TransferError> {
    let stages: Option<Vec<Stage>> = chain.iter().map(|e| Stage::of_entry(e)).collect();
    let ok = match stages.as_deref() {
        Some([Stage::PretrainIpa]) | Some([Stage::MonolingualBaseline]) => true,
        Some([Stage::PretrainIpa, Stage::Adapt]) | Some([Stage::PretrainIpa, Stage::Finetune]) => true,
        Some([Stage::PretrainIpa, Stage::Adapt, Stage::Finetune]) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(TransferError::WrongParentStage { stage: "checkpoint", found: chain.to_vec() })
    }
}

fn last_stage(chain: &[String]) -> Option<Stage> {
    chain.last().and_then(|e| Stage::of_entry(e))
}

/// A transcribed utterance with features loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcribed<T> {
    pub id: String,
    pub features: Tensor<T>,
    /// Space-separated IPA words.
    pub ipa: String,
    /// Orthographic transcript.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageData<T> {
    pub language: String,
    pub train: Vec<Transcribed<T>>,
    pub dev: Vec<Transcribed<T>>,
}

/// A stage's output checkpoint together with its training log.
#[derive(Debug, Clone)]
pub struct StageOutput<T> {
    pub checkpoint: Checkpoint<T>,
    pub metrics: Vec<MetricRecord>,
    pub skipped: Vec<String>,
    pub steps: u64,
}

/// Loads features and IPA for manifest entries. Entries without an IPA
/// transcript are converted with `g2p`; without a converter they are an error.
pub fn load_transcribed<T: Scalar>(
    utts: &[Utterance],
    frontend: &LogMelConfig,
    g2p: Option<&Converter<'_>>,
) -> Result<Vec<Transcribed<T>>, TransferError> {
    utts.iter()
        .map(|u| {
            let err = |msg: String| TransferError::Data { id: u.id.clone(), msg };
            let fm = u.features(frontend).map_err(|e| err(e.to_string()))?;
            let features = Tensor::new(vec![fm.frames, fm.dim], fm.data.iter().map(|&x| T::of(x as f64)).collect())
                .map_err(|e| err(e.to_string()))?;
            let ipa = match (&u.ipa, g2p) {
                (Some(ipa), _) => ipa.clone(),
                (None, Some(c)) => c.convert(&u.text).map_err(|e| err(e.to_string()))?,
                (None, None) => return Err(err("no IPA transcript and no g2p converter".into())),
            };
            Ok(Transcribed { id: u.id.clone(), features, ipa, text: u.text.clone() })
        })
        .collect()
}

/// IPA token ids per utterance; symbols absent from `vocab` are collected
/// into one error.
pub fn ipa_examples<T: Scalar>(utts: &[Transcribed<T>], vocab: &Vocabulary) -> Result<Vec<Example<T>>, TransferError> {
    let table = SymbolTable::default();
    let mut missing = BTreeSet::new();
    let mut out = Vec::with_capacity(utts.len());
    for u in utts {
        let mut targets = Vec::new();
        for tok in parse_ipa(&u.ipa, &table, true)? {
            match vocab.id(&tok.text) {
                Some(id) => targets.push(id),
                None => {
                    missing.insert(tok.text);
                }
            }
        }
        out.push(Example { id: u.id.clone(), features: u.features.clone(), targets });
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(TransferError::VocabMissingSymbols(missing.into_iter().collect()))
    }
}

/// BPE ids of the orthographic transcripts.
pub fn bpe_examples<T: Scalar>(utts: &[Transcribed<T>], bpe: &crate::bpe::BpeModel) -> Vec<Example<T>> {
    utts.iter().map(|u| Example { id: u.id.clone(), features: u.features.clone(), targets: bpe.encode(&u.text) }).collect()
}

/// Union of the phone inventories of every language's training and dev
/// transcripts.
pub fn pooled_ipa_vocabulary<T>(langs: &[LanguageData<T>]) -> Result<Vocabulary, TransferError> {
    let table = SymbolTable::default();
    let invs = langs
        .iter()
        .map(|l| build_inventory(&l.language, l.train.iter().chain(&l.dev).map(|u| u.ipa.as_str()), &table, true))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Vocabulary::ipa_union(&invs)?)
}

fn seed_record(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Trains one model on the pooled IPA transcripts of all `langs`. The output
/// vocabulary is the union of their phone inventories.
pub fn pretrain_ipa<T: Scalar>(
    langs: &[LanguageData<T>],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    frontend_hash: &str,
) -> Result<StageOutput<T>, TransferError> {
    if langs.is_empty() {
        return Err(TransferError::BadConfig("pretraining needs at least one language".into()));
    }
    let vocab = pooled_ipa_vocabulary(langs)?;
    let arch = arch.clone().with_vocab(vocab.len());
    arch.validate()?;
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for l in langs {
        train.extend(ipa_examples(&l.train, &vocab)?);
        dev.extend(ipa_examples(&l.dev, &vocab)?);
    }
    let init_seed = derive_seed(cfg.seed, &["init"]);
    let init = init_params(&arch, init_seed)?;
    let out = train_loop(init, &arch, &train, &dev, cfg, Stage::PretrainIpa.tag())?;
    let names: Vec<&str> = langs.iter().map(|l| l.language.as_str()).collect();
    Ok(StageOutput {
        checkpoint: Checkpoint {
            params: out.params,
            arch,
            vocab,
            provenance: vec![format!("{}:{}", Stage::PretrainIpa.tag(), names.join("+"))],
            frontend_hash: frontend_hash.to_string(),
            seeds: seed_record(&[("init", init_seed), ("train", cfg.seed)]),
            averaged_epochs: out.averaged_epochs,
        },
        metrics: out.metrics,
        skipped: out.skipped,
        steps: out.steps,
    })
}

/// Training settings for adaptation: `base` with a constant learning rate
/// of `lr` for exactly `epochs` epochs and no averaging.
pub fn adapt_train_config(base: &TrainConfig, lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig { peak_lr: lr, constant_lr: true, epochs, average_last: epochs.min(1), ..base.clone() }
}

/// Briefly retrains every parameter of a pretrained IPA model on one target
/// language's IPA data, starting from fresh optimizer state.
pub fn adapt_ipa_model<T: Scalar>(
    parent: &Checkpoint<T>,
    target: &LanguageData<T>,
    base: &TrainConfig,
    lr: f64,
    epochs: usize,
) -> Result<StageOutput<T>, TransferError> {
    if parent.vocab.kind() != VocabKind::Ipa || last_stage(&parent.provenance) != Some(Stage::PretrainIpa) {
        return Err(TransferError::WrongParentStage { stage: "adapt", found: parent.provenance.clone() });
    }
    let train = ipa_examples(&target.train, &parent.vocab)?;
    let dev = ipa_examples(&target.dev, &parent.vocab)?;
    let cfg = adapt_train_config(base, lr, epochs);
    let out = train_loop(parent.params.clone(), &parent.arch, &train, &dev, &cfg, Stage::Adapt.tag())?;
    let mut provenance = parent.provenance.clone();
    provenance.push(format!("{}:{}", Stage::Adapt.tag(), target.language));
    let mut seeds = parent.seeds.clone();
    seeds.insert("adapt_train".into(), cfg.seed);
    Ok(StageOutput {
        checkpoint: Checkpoint { params: out.params, provenance, seeds, averaged_epochs: out.averaged_epochs, ..parent.clone() },
        metrics: out.metrics,
        skipped: out.skipped,
        steps: out.steps,
    })
}

/// Seed for the freshly initialized decoder and CTC head of `language`.
pub fn decoder_seed(seed: u64, language: &str) -> u64 {
    derive_seed(seed, &["decoder", language])
}

/// The finetuning starting point: the parent's encoder tensors unchanged,
/// decoder and CTC head drawn fresh and sized to `vocab`.
pub fn prepare_finetune<T: Scalar>(
    parent: &Checkpoint<T>,
    vocab: &Vocabulary,
    language: &str,
    seed: u64,
) -> Result<Checkpoint<T>, TransferError> {
    let legal = matches!(last_stage(&parent.provenance), Some(Stage::PretrainIpa | Stage::Adapt));
    if parent.vocab.kind() != VocabKind::Ipa || !legal {
        return Err(TransferError::WrongParentStage { stage: "finetune", found: parent.provenance.clone() });
    }
    if vocab.kind() != VocabKind::Bpe {
        return Err(TransferError::BadConfig("finetuning needs a BPE vocabulary".into()));
    }
    let arch = parent.arch.clone().with_vocab(vocab.len());
    arch.validate()?;
    let dseed = decoder_seed(seed, language);
    let mut params = crate::model::ModelParams::new();
    for (name, t) in parent.params.iter().filter(|(n, _)| is_encoder_param(n)) {
        params.insert(name, t.clone());
    }
    reinit_where(&mut params, &arch, dseed, |n| !is_encoder_param(n));
    params.check_against(&arch)?;
    let mut seeds = parent.seeds.clone();
    seeds.insert("decoder".into(), dseed);
    Ok(Checkpoint {
        params,
        arch,
        vocab: vocab.clone(),
        provenance: parent.provenance.clone(),
        frontend_hash: parent.frontend_hash.clone(),
        seeds,
        averaged_epochs: Vec::new(),
    })
}

fn train_bpe_stage<T: Scalar>(
    start: Checkpoint<T>,
    target: &LanguageData<T>,
    bpe: &crate::bpe::BpeModel,
    cfg: &TrainConfig,
    entry: String,
    stage: Stage,
) -> Result<StageOutput<T>, TransferError> {
    let train = bpe_examples(&target.train, bpe);
    let dev = bpe_examples(&target.dev, bpe);
    let out = train_loop(start.params.clone(), &start.arch, &train, &dev, cfg, stage.tag())?;
    let mut provenance = start.provenance.clone();
    provenance.push(entry);
    let mut seeds = start.seeds.clone();
    seeds.insert("train".into(), cfg.seed);
    Ok(StageOutput {
        checkpoint: Checkpoint { params: out.params, provenance, seeds, averaged_epochs: out.averaged_epochs, ..start },
        metrics: out.metrics,
        skipped: out.skipped,
        steps: out.steps,
    })
}

/// Finetunes the whole model on BPE-tokenized target transcripts after
/// replacing the decoder.
pub fn finetune_target<T: Scalar>(
    parent: &Checkpoint<T>,
    target: &LanguageData<T>,
    bpe: &crate::bpe::BpeModel,
    cfg: &TrainConfig,
) -> Result<StageOutput<T>, TransferError> {
    let start = prepare_finetune(parent, bpe.vocab(), &target.language, cfg.seed)?;
    let entry = format!("{}:{}", Stage::Finetune.tag(), target.language);
    train_bpe_stage(start, target, bpe, cfg, entry, Stage::Finetune)
}

/// Step-0 parameters of the baseline: a random encoder and the same decoder
/// the finetuned model would start from.
pub fn baseline_init<T: Scalar>(
    arch: &ArchConfig,
    vocab: &Vocabulary,
    language: &str,
    seed: u64,
    frontend_hash: &str,
) -> Result<Checkpoint<T>, TransferError> {
    let arch = arch.clone().with_vocab(vocab.len());
    arch.validate()?;
    let eseed = derive_seed(seed, &["encoder", language]);
    let dseed = decoder_seed(seed, language);
    let mut params = init_params(&arch, eseed)?;
    reinit_where(&mut params, &arch, dseed, |n| !is_encoder_param(n));
    Ok(Checkpoint {
        params,
        arch,
        vocab: vocab.clone(),
        provenance: Vec::new(),
        frontend_hash: frontend_hash.to_string(),
        seeds: seed_record(&[("encoder", eseed), ("decoder", dseed)]),
        averaged_epochs: Vec::new(),
    })
}

/// Trains the finetuning architecture and recipe from scratch on the target
/// language alone.
pub fn train_monolingual_baseline<T: Scalar>(
    arch: &ArchConfig,
    target: &LanguageData<T>,
    bpe: &crate::bpe::BpeModel,
    cfg: &TrainConfig,
    frontend_hash: &str,
) -> Result<StageOutput<T>, TransferError> {
    let start = baseline_init(arch, bpe.vocab(), &target.language, cfg.seed, frontend_hash)?;
    let entry = format!("{}:{}", Stage::MonolingualBaseline.tag(), target.language);
    train_bpe_stage(start, target, bpe, cfg, entry, Stage::MonolingualBaseline)
}
