use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ipa_transfer::bpe::{train_bpe, BpeModel};
use ipa_transfer::checkpoint::Checkpoint;
use ipa_transfer::eval::{decode_utterance, save_report, score_corpus, write_hypotheses, ScoreUnit};
use ipa_transfer::frontend::synth::{generate, SynthConfig};
use ipa_transfer::frontend::{load_manifest, save_manifest, AudioSource, Utterance};
use ipa_transfer::g2p::{Converter, Lexicon, OovPolicy, RuleSet};
use ipa_transfer::phoneset::{build_inventory, SymbolTable, VocabKind};
use ipa_transfer::text::Normalizer;
use ipa_transfer::training::{MetricRecord, TrainConfig};
use ipa_transfer::transfer::{
    adapt_ipa_model, adapt_train_config, finetune_target, load_transcribed, pretrain_ipa, train_monolingual_baseline,
    DeskRecipe, LanguageData, StageOutput, Transcribed,
};
use ipa_transfer::viz::{emit_scatter, extract_frame_embeddings, tsne, FrameRef, LanguageFrames, TsneConfig};
use ipa_transfer::Tensor;

use crate::config::{ExperimentConfig, LanguagePaths, Snapshot, StageLock};
use crate::error::CliError;
use crate::Command;

const SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const PRETRAIN_STAGE: &str = "train-ipa";

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { out, seed, high, low } => synth(&out, seed, high, low),
        Command::Prepare { config } => prepare(&ExperimentConfig::load(&config)?),
        Command::G2p { config } => g2p(&ExperimentConfig::load(&config)?),
        Command::BpeTrain { config, lang } => bpe_train(&ExperimentConfig::load(&config)?, &lang),
        Command::TrainIpa { config } => train_ipa(&ExperimentConfig::load(&config)?),
        Command::Adapt { config, lang, parent } => adapt(&ExperimentConfig::load(&config)?, &lang, &parent),
        Command::Finetune { config, lang, parent, out } => {
            finetune(&ExperimentConfig::load(&config)?, &lang, parent.as_deref(), out.as_deref())
        }
        Command::Baseline { config, lang } => baseline(&ExperimentConfig::load(&config)?, &lang),
        Command::Decode { config, stage, lang, split, beam } => {
            decode(&ExperimentConfig::load(&config)?, &stage, lang.as_deref(), &split, beam)
        }
        Command::Score { reference, hyp, unit, out } => score(&reference, &hyp, &unit, out.as_deref()),
        Command::Embed { config, stage, langs, split, n_per_lang } => {
            embed(&ExperimentConfig::load(&config)?, &stage, langs.as_deref(), &split, n_per_lang)
        }
        Command::Tsne { input, out_prefix, perplexity, iterations, seed } => {
            run_tsne(&input, &out_prefix, TsneConfig { perplexity, iterations, seed, ..TsneConfig::default() })
        }
    }
}

/// The synthetic corpus recipe: desk architecture, feature-level inputs and
/// schedules sized for a few thousand short utterances.
pub fn synth_experiment(name: &str, outs: &[ipa_transfer::frontend::synth::SynthOutput], base: &Path) -> ExperimentConfig {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_path_buf();
    let languages = outs
        .iter()
        .map(|o| {
            let paths = LanguagePaths {
                train: rel(&o.train),
                dev: rel(&o.dev),
                test: Some(rel(&o.test)),
                lexicon: rel(&o.lexicon),
                rules: rel(&o.rules),
                oov: "rules".into(),
            };
            (o.code.clone(), paths)
        })
        .collect();
    let recipe = DeskRecipe::synthetic();
    ExperimentConfig {
        name: name.to_string(),
        runs_dir: PathBuf::from("runs"),
        pretrain_languages: outs.iter().map(|o| o.code.clone()).collect(),
        frontend: Default::default(),
        arch: recipe.arch,
        pretrain: recipe.pretrain,
        adapt: crate::config::AdaptSettings { batch_frames: Some(recipe.adapt_batch_frames), ..Default::default() },
        finetune: recipe.finetune,
        bpe: crate::config::BpeSettings { target_size: recipe.bpe_size },
        decode: crate::config::DecodeSettings { beam: recipe.beam, max_len_ratio: 1.0 },
        embed: crate::config::EmbedSettings { n_per_lang: 300, seed: 0 },
        tsne: TsneConfig::default(),
        languages,
    }
}

fn synth(out: &Path, seed: u64, high: usize, low: usize) -> Result<(), CliError> {
    let cfg = SynthConfig::three_language(seed, high, low);
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let outs = generate(&cfg, out)?;
    let exp = synth_experiment("synth", &outs, out);
    let text = toml::to_string(&exp).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(out.join("experiment.toml"), text)?;
    std::fs::write(out.join("synth.json"), serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Config(e.to_string()))?)?;
    println!("{}", serde_json::json!({ "corpus": out, "config": out.join("experiment.toml") }));
    Ok(())
}

/// Best available manifest: g2p output, then prepared, then the configured file.
fn manifest_path(cfg: &ExperimentConfig, lang: &str, split: &str) -> Result<Option<PathBuf>, CliError> {
    for stage in ["g2p", "prepare"] {
        let p = cfg.stage_dir(stage).join(lang).join(format!("{split}.jsonl"));
        if p.exists() {
            return Ok(Some(p));
        }
    }
    let l = cfg.language(lang)?;
    Ok(match split {
        "train" => Some(l.train.clone()),
        "dev" => Some(l.dev.clone()),
        "test" => l.test.clone(),
        other => return Err(CliError::Config(format!("unknown split {other:?}"))),
    })
}

fn split_manifest(cfg: &ExperimentConfig, lang: &str, split: &str) -> Result<Vec<Utterance>, CliError> {
    let p = manifest_path(cfg, lang, split)?
        .ok_or_else(|| CliError::Config(format!("language {lang} has no {split} manifest")))?;
    Ok(load_manifest(&p)?)
}

fn g2p_manifest(cfg: &ExperimentConfig, lang: &str, split: &str) -> Result<Vec<Utterance>, CliError> {
    let p = cfg.stage_dir("g2p").join(lang).join(format!("{split}.jsonl"));
    if !p.exists() {
        return Err(CliError::StageOrder(format!("no IPA transcripts for {lang}/{split}; run `ipat g2p` first")));
    }
    Ok(load_manifest(&p)?)
}

fn prepare(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = cfg.stage_dir("prepare");
    let _lock = StageLock::acquire(&dir)?;
    let logmel = ipa_transfer::frontend::LogMel::new(cfg.frontend.clone())?;
    for (code, paths) in &cfg.languages {
        let out = dir.join(code);
        let feats = out.join("feats");
        std::fs::create_dir_all(&feats)?;
        for (split, src) in [("train", Some(&paths.train)), ("dev", Some(&paths.dev)), ("test", paths.test.as_ref())] {
            let Some(src) = src else { continue };
            let mut utts = load_manifest(src)?;
            for u in &mut utts {
                if let AudioSource::Wav(p) = &u.source {
                    let (samples, rate) = ipa_transfer::frontend::features::read_wav(p)?;
                    if rate != cfg.frontend.sample_rate {
                        return Err(CliError::Data(format!("{}: sample rate {rate}, expected {}", u.id, cfg.frontend.sample_rate)));
                    }
                    let fm = logmel.compute(&samples)?;
                    let fp = feats.join(format!("{}.feat", u.id));
                    fm.save(&fp)?;
                    u.source = AudioSource::Features(fp);
                } else {
                    u.features(&cfg.frontend)?;
                }
            }
            save_manifest(&out.join(format!("{split}.jsonl")), &utts)?;
        }
    }
    std::fs::write(dir.join("frontend.hash"), cfg.frontend.hash() + "\n")?;
    Snapshot { stage: "prepare".into(), language: None, parent: None, train: None, experiment: cfg.clone() }.write(&dir)?;
    Ok(())
}

fn g2p(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = cfg.stage_dir("g2p");
    let _lock = StageLock::acquire(&dir)?;
    let table = SymbolTable::default();
    for (code, paths) in &cfg.languages {
        let lexicon = Lexicon::load(&paths.lexicon, code, &table)?;
        let rules = RuleSet::load(&paths.rules, &table)?;
        let policy: OovPolicy = paths.oov.parse().map_err(CliError::Config)?;
        let conv = Converter { lexicon: &lexicon, rules: &rules, policy, normalizer: Normalizer::default() };
        let out = dir.join(code);
        std::fs::create_dir_all(&out)?;
        let mut seen = Vec::new();
        for split in SPLITS {
            let Some(src) = resolve_pre_g2p(cfg, code, split)? else { continue };
            let mut utts = load_manifest(&src)?;
            for u in &mut utts {
                u.ipa = Some(conv.convert(&u.text).map_err(|e| CliError::Data(format!("{}: {e}", u.id)))?);
            }
            if split != "test" {
                seen.extend(utts.iter().filter_map(|u| u.ipa.clone()));
            }
            save_manifest(&out.join(format!("{split}.jsonl")), &utts)?;
        }
        let inv = build_inventory(code, seen.iter().map(String::as_str), &table, true)?;
        let mut f = std::fs::File::create(out.join("inventory.txt"))?;
        inv.write_to(&mut f)?;
    }
    Snapshot { stage: "g2p".into(), language: None, parent: None, train: None, experiment: cfg.clone() }.write(&dir)?;
    Ok(())
}

fn resolve_pre_g2p(cfg: &ExperimentConfig, lang: &str, split: &str) -> Result<Option<PathBuf>, CliError> {
    let p = cfg.stage_dir("prepare").join(lang).join(format!("{split}.jsonl"));
    if p.exists() {
        return Ok(Some(p));
    }
    let l = cfg.language(lang)?;
    Ok(match split {
        "train" => Some(l.train.clone()),
        "dev" => Some(l.dev.clone()),
        _ => l.test.clone(),
    })
}

fn bpe_dir(cfg: &ExperimentConfig, lang: &str) -> PathBuf {
    cfg.stage_dir(&format!("bpe-{lang}"))
}

fn bpe_train(cfg: &ExperimentConfig, lang: &str) -> Result<(), CliError> {
    let utts = split_manifest(cfg, lang, "train")?;
    let dir = bpe_dir(cfg, lang);
    let _lock = StageLock::acquire(&dir)?;
    let model = train_bpe(utts.iter().map(|u| u.text.as_str()), cfg.bpe.target_size, &Normalizer::default())?;
    model.save(&dir.join("merges.txt"), &dir.join("vocab.txt"))?;
    Snapshot { stage: format!("bpe-{lang}"), language: Some(lang.into()), parent: None, train: None, experiment: cfg.clone() }
        .write(&dir)?;
    Ok(())
}

fn load_bpe(cfg: &ExperimentConfig, lang: &str) -> Result<BpeModel, CliError> {
    let dir = bpe_dir(cfg, lang);
    if !dir.join("merges.txt").exists() {
        return Err(CliError::StageOrder(format!("no BPE model for {lang}; run `ipat bpe-train --lang {lang}` first")));
    }
    Ok(BpeModel::load(&dir.join("merges.txt"), &dir.join("vocab.txt"), Normalizer::default())?)
}

fn frontend_hash(cfg: &ExperimentConfig) -> String {
    cfg.frontend.hash()
}

fn ipa_language(cfg: &ExperimentConfig, lang: &str) -> Result<LanguageData<f32>, CliError> {
    let train = load_transcribed(&g2p_manifest(cfg, lang, "train")?, &cfg.frontend, None)?;
    let dev = load_transcribed(&g2p_manifest(cfg, lang, "dev")?, &cfg.frontend, None)?;
    Ok(LanguageData { language: lang.to_string(), train, dev })
}

/// Orthographic data; IPA is not needed for BPE targets.
fn text_split(cfg: &ExperimentConfig, lang: &str, split: &str) -> Result<Vec<Transcribed<f32>>, CliError> {
    let mut utts = split_manifest(cfg, lang, split)?;
    for u in &mut utts {
        u.ipa.get_or_insert_with(String::new);
    }
    Ok(load_transcribed(&utts, &cfg.frontend, None)?)
}

fn text_language(cfg: &ExperimentConfig, lang: &str) -> Result<LanguageData<f32>, CliError> {
    Ok(LanguageData { language: lang.to_string(), train: text_split(cfg, lang, "train")?, dev: text_split(cfg, lang, "dev")? })
}

fn load_parent(cfg: &ExperimentConfig, stage: &str) -> Result<Checkpoint<f32>, CliError> {
    let p = cfg.stage_dir(stage).join("checkpoint.bin");
    if !p.exists() {
        return Err(CliError::StageOrder(format!("parent stage {stage:?} has no checkpoint at {}", p.display())));
    }
    Ok(Checkpoint::load(&p, None)?)
}

fn write_stage(dir: &Path, out: &StageOutput<f32>, snapshot: Snapshot) -> Result<(), CliError> {
    let ck = &out.checkpoint;
    ck.save(&dir.join("checkpoint.bin"))?;
    let chain = ck.provenance.join(" > ");
    ck.vocab.save(&dir.join("vocab.txt"), &[("kind", ck.vocab.kind().as_str()), ("provenance", &chain)])?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
    for m in &out.metrics {
        let line = serde_json::to_string::<MetricRecord>(m).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    if !out.skipped.is_empty() {
        std::fs::write(dir.join("skipped.txt"), out.skipped.join("\n") + "\n")?;
    }
    snapshot.write(dir)?;
    println!("{}", serde_json::json!({ "stage": snapshot.stage, "checkpoint": dir.join("checkpoint.bin"), "steps": out.steps }));
    Ok(())
}

fn train_ipa(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let langs = cfg.pretrain_languages.iter().map(|l| ipa_language(cfg, l)).collect::<Result<Vec<_>, _>>()?;
    let dir = cfg.stage_dir(PRETRAIN_STAGE);
    let _lock = StageLock::acquire(&dir)?;
    let out = pretrain_ipa(&langs, &cfg.arch, &cfg.pretrain, &frontend_hash(cfg))?;
    let snap = Snapshot { stage: PRETRAIN_STAGE.into(), language: None, parent: None, train: Some(cfg.pretrain.clone()), experiment: cfg.clone() };
    write_stage(&dir, &out, snap)
}

fn adapt(cfg: &ExperimentConfig, lang: &str, parent: &str) -> Result<(), CliError> {
    cfg.language(lang)?;
    let parent_ck = load_parent(cfg, parent)?;
    let data = ipa_language(cfg, lang)?;
    let stage = format!("adapt-{lang}");
    let dir = cfg.stage_dir(&stage);
    let _lock = StageLock::acquire(&dir)?;
    let base = TrainConfig { batch_frames: cfg.adapt.batch_frames.unwrap_or(cfg.pretrain.batch_frames), ..cfg.pretrain.clone() };
    let out = adapt_ipa_model(&parent_ck, &data, &base, cfg.adapt.lr, cfg.adapt.epochs)?;
    let train = adapt_train_config(&base, cfg.adapt.lr, cfg.adapt.epochs);
    let snap = Snapshot { stage, language: Some(lang.into()), parent: Some(parent.into()), train: Some(train), experiment: cfg.clone() };
    write_stage(&dir, &out, snap)
}

fn finetune(cfg: &ExperimentConfig, lang: &str, parent: Option<&str>, out: Option<&str>) -> Result<(), CliError> {
    cfg.language(lang)?;
    let parent = parent.unwrap_or(PRETRAIN_STAGE);
    let parent_ck = load_parent(cfg, parent)?;
    let bpe = load_bpe(cfg, lang)?;
    let data = text_language(cfg, lang)?;
    let stage = match out {
        Some(s) => s.to_string(),
        None if parent == PRETRAIN_STAGE => format!("finetune-{lang}"),
        None => format!("finetune-{lang}-{parent}"),
    };
    let dir = cfg.stage_dir(&stage);
    let _lock = StageLock::acquire(&dir)?;
    let result = finetune_target(&parent_ck, &data, &bpe, &cfg.finetune)?;
    let snap = Snapshot { stage, language: Some(lang.into()), parent: Some(parent.into()), train: Some(cfg.finetune.clone()), experiment: cfg.clone() };
    write_stage(&dir, &result, snap)
}

fn baseline(cfg: &ExperimentConfig, lang: &str) -> Result<(), CliError> {
    cfg.language(lang)?;
    let bpe = load_bpe(cfg, lang)?;
    let data = text_language(cfg, lang)?;
    let stage = format!("baseline-{lang}");
    let dir = cfg.stage_dir(&stage);
    let _lock = StageLock::acquire(&dir)?;
    let result = train_monolingual_baseline(&cfg.arch, &data, &bpe, &cfg.finetune, &frontend_hash(cfg))?;
    let snap = Snapshot { stage, language: Some(lang.into()), parent: None, train: Some(cfg.finetune.clone()), experiment: cfg.clone() };
    write_stage(&dir, &result, snap)
}

fn target_language(ck: &Checkpoint<f32>) -> Option<String> {
    let last = ck.provenance.last()?;
    let lang = last.split_once(':')?.1;
    (!lang.contains('+')).then(|| lang.to_string())
}

fn decode(cfg: &ExperimentConfig, stage: &str, lang: Option<&str>, split: &str, beam: Option<usize>) -> Result<(), CliError> {
    let ck = load_parent(cfg, stage)?;
    if ck.frontend_hash != frontend_hash(cfg) {
        return Err(CliError::Config(format!("checkpoint frontend {} differs from config {}", ck.frontend_hash, frontend_hash(cfg))));
    }
    let lang = match lang {
        Some(l) => l.to_string(),
        None => target_language(&ck).ok_or_else(|| CliError::Config("checkpoint covers several languages; pass --lang".into()))?,
    };
    let ipa = ck.vocab.kind() == VocabKind::Ipa;
    let utts = if ipa { g2p_manifest(cfg, &lang, split)? } else { split_manifest(cfg, &lang, split)? };
    let beam = beam.unwrap_or(cfg.decode.beam);
    if beam == 0 {
        return Err(CliError::Config("beam must be at least 1".into()));
    }
    let dir = cfg.stage_dir(stage);
    let _lock = StageLock::acquire(&dir)?;
    let mut hyps = Vec::with_capacity(utts.len());
    let mut refs = String::new();
    for u in &utts {
        let fm = u.features(&cfg.frontend)?;
        let feats = Tensor::new(vec![fm.frames, fm.dim], fm.data).map_err(|e| CliError::Data(e.to_string()))?;
        let h = decode_utterance(&ck.params, &ck.arch, &ck.vocab, &feats, beam, cfg.decode.max_len_ratio)?;
        hyps.push((u.id.clone(), h));
        let text = if ipa { u.ipa.clone().unwrap_or_default() } else { u.text.clone() };
        refs.push_str(&serde_json::json!({ "id": u.id, "text": text }).to_string());
        refs.push('\n');
    }
    let hyp_path = dir.join(format!("hyps-{lang}-{split}.jsonl"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&hyp_path)?);
    write_hypotheses(&mut f, &hyps)?;
    f.flush()?;
    let ref_path = dir.join(format!("refs-{lang}-{split}.jsonl"));
    std::fs::write(&ref_path, refs)?;
    println!("{}", serde_json::json!({ "hypotheses": hyp_path, "references": ref_path, "utterances": hyps.len() }));
    Ok(())
}

/// `(id, text)` pairs from JSON lines; with `prefer_ipa`, an `ipa` field
/// wins over `text`.
fn read_pairs(path: &Path, prefer_ipa: bool) -> Result<Vec<(String, String)>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| CliError::Data(format!("{}:{}: {m}", path.display(), i + 1));
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(&e.to_string()))?;
        let id = v.get("id").and_then(|x| x.as_str()).ok_or_else(|| bad("missing id"))?;
        let field = if prefer_ipa && v.get("ipa").is_some() { "ipa" } else { "text" };
        let text = v.get(field).and_then(|x| x.as_str()).ok_or_else(|| bad("missing text"))?;
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

fn score(reference: &Path, hyp: &Path, unit: &str, out: Option<&Path>) -> Result<(), CliError> {
    let unit: ScoreUnit = unit.parse().map_err(CliError::Config)?;
    let phone = unit == ScoreUnit::Phone;
    let refs = read_pairs(reference, phone)?;
    let hyps = read_pairs(hyp, false)?;
    let report = score_corpus(&refs, &hyps, unit, &Normalizer::default())?;
    if let Some(p) = out {
        save_report(p, &report)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "unit": unit, "error_rate": report.error_rate, "substitutions": report.substitutions,
            "insertions": report.insertions, "deletions": report.deletions, "reference_tokens": report.reference_tokens,
        })
    );
    Ok(())
}

fn embed(cfg: &ExperimentConfig, stage: &str, langs: Option<&str>, split: &str, n: Option<usize>) -> Result<(), CliError> {
    let ck = load_parent(cfg, stage)?;
    let langs: Vec<String> = match langs {
        Some(s) => s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
        None => cfg.pretrain_languages.clone(),
    };
    let n = n.unwrap_or(cfg.embed.n_per_lang);
    let mut data: Vec<(String, Vec<(String, Tensor<f32>)>)> = Vec::new();
    for l in &langs {
        let utts = split_manifest(cfg, l, split)?;
        let mut feats = Vec::with_capacity(utts.len());
        for u in &utts {
            let fm = u.features(&cfg.frontend)?;
            feats.push((u.id.clone(), Tensor::new(vec![fm.frames, fm.dim], fm.data).map_err(|e| CliError::Data(e.to_string()))?));
        }
        data.push((l.clone(), feats));
    }
    let frames: Vec<LanguageFrames<'_, f32>> = data.iter().map(|(l, u)| LanguageFrames { language: l, utterances: u }).collect();
    let set = extract_frame_embeddings(&ck.params, &ck.arch, &frames, n, cfg.embed.seed)?;
    let dir = cfg.stage_dir(stage);
    let _lock = StageLock::acquire(&dir)?;
    let path = dir.join(format!("embeddings-{split}.csv"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(f, "# stage={stage} split={split} n_per_lang={n} seed={}", cfg.embed.seed)?;
    let d = set.matrix.shape()[1];
    let mut w = csv::Writer::from_writer(&mut f);
    let mut header = vec!["lang".to_string(), "utt".into(), "frame".into()];
    header.extend((0..d).map(|k| format!("e{k}")));
    w.write_record(&header).map_err(|e| CliError::Io(e.to_string()))?;
    for (i, (l, fr)) in set.labels.iter().zip(&set.frames).enumerate() {
        let mut rec = vec![l.clone(), fr.utt.clone(), fr.frame.to_string()];
        rec.extend(set.matrix.row(i).iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush()?;
    drop(w);
    f.flush()?;
    println!("{}", serde_json::json!({ "embeddings": path, "rows": set.labels.len() }));
    Ok(())
}

fn run_tsne(input: &Path, prefix: &Path, tcfg: TsneConfig) -> Result<(), CliError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(input)
        .map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?;
    let (mut labels, mut frames, mut data) = (Vec::new(), Vec::new(), Vec::new());
    let mut dim = None;
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Data(e.to_string()))?;
        let bad = |m: String| CliError::Data(format!("{}: {m}", input.display()));
        if rec.len() < 4 {
            return Err(bad("expected lang,utt,frame and at least one value".into()));
        }
        let d = rec.len() - 3;
        if *dim.get_or_insert(d) != d {
            return Err(bad("rows have different widths".into()));
        }
        labels.push(rec[0].to_string());
        frames.push(FrameRef { utt: rec[1].to_string(), frame: rec[2].parse().map_err(|e| bad(format!("frame: {e}")))? });
        for v in rec.iter().skip(3) {
            data.push(v.parse::<f64>().map_err(|e| bad(format!("value {v:?}: {e}")))?);
        }
    }
    let x = Tensor::new(vec![labels.len(), dim.unwrap_or(0)], data).map_err(|e| CliError::Data(e.to_string()))?;
    let out = tsne(&x, &tcfg)?;
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(format!(".{ext}"));
        PathBuf::from(p)
    };
    let kl = out.kl_trace.last().map_or(f64::NAN, |k| k.1);
    let comment = format!("{} kl_final={kl}", tcfg.describe());
    if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    emit_scatter(&out.points, &labels, &frames, &comment, &with_ext("csv"), &with_ext("svg"))?;
    println!("{}", serde_json::json!({ "csv": with_ext("csv"), "svg": with_ext("svg"), "kl": kl }));
    Ok(())
}
