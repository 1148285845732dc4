//! JSON-lines dataset manifests and random hour-budget subsets.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{compute_logmel, read_wav, FeatureMatrix, LogMelConfig};
use super::FrontendError;

/// Where an utterance's acoustics live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AudioSource {
    Wav(PathBuf),
    Features(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: String,
    pub source: AudioSource,
    pub duration_s: f64,
    pub text: String,
    pub ipa: Option<String>,
}

impl Utterance {
    /// Loads cached features, or computes log-mel features from audio.
    pub fn features(&self, cfg: &LogMelConfig) -> Result<FeatureMatrix, FrontendError> {
        match &self.source {
            AudioSource::Features(p) => FeatureMatrix::load(p),
            AudioSource::Wav(p) => {
                let (samples, rate) = read_wav(p)?;
                if rate != cfg.sample_rate {
                    return Err(FrontendError::Audio(format!(
                        "{}: sample rate {rate} differs from configured {}",
                        self.id, cfg.sample_rate
                    )));
                }
                compute_logmel(&samples, rate, cfg)
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feats: Option<String>,
    dur_s: f64,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ipa: Option<String>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses manifest text; relative paths resolve against `base`.
pub fn parse_manifest<R: BufRead>(r: R, base: &Path) -> Result<Vec<Utterance>, FrontendError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| FrontendError::Parse { line: i + 1, msg: e.to_string() })?;
        if !rec.dur_s.is_finite() || rec.dur_s < 0.0 {
            return Err(FrontendError::Parse { line: i + 1, msg: "dur_s must be a non-negative number".into() });
        }
        if !ids.insert(rec.id.clone()) {
            return Err(FrontendError::DuplicateId(rec.id));
        }
        let source = match (&rec.feats, &rec.audio) {
            (Some(f), _) => AudioSource::Features(resolve(base, f)),
            (None, Some(a)) => AudioSource::Wav(resolve(base, a)),
            (None, None) => return Err(FrontendError::MissingAudio(rec.id)),
        };
        let path = match &source {
            AudioSource::Features(p) | AudioSource::Wav(p) => p,
        };
        if !path.exists() {
            return Err(FrontendError::MissingAudio(rec.id));
        }
        out.push(Utterance {
            id: rec.id,
            language: rec.lang,
            source,
            duration_s: rec.dur_s,
            text: rec.text,
            ipa: rec.ipa,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>, FrontendError> {
    let f = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(std::io::BufReader::new(f), base)
}

/// Writes a manifest; paths under `base` are stored relative to it.
pub fn write_manifest<W: Write>(mut w: W, utts: &[Utterance], base: &Path) -> Result<(), FrontendError> {
    for u in utts {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        let (audio, feats) = match &u.source {
            AudioSource::Wav(p) => (Some(rel(p)), None),
            AudioSource::Features(p) => (None, Some(rel(p))),
        };
        let rec = Record {
            id: u.id.clone(),
            lang: u.language.clone(),
            audio,
            feats,
            dur_s: u.duration_s,
            text: u.text.clone(),
            ipa: u.ipa.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| FrontendError::Parse { line: 0, msg: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_manifest(path: &Path, utts: &[Utterance]) -> Result<(), FrontendError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut buf = Vec::new();
    write_manifest(&mut buf, utts, base)?;
    std::fs::write(path, buf)?;
    Ok(())
}

const HOUR_EPS: f64 = 1e-9;

/// Uniform random subset without replacement: walks a seeded shuffle until
/// the accumulated duration first reaches `hours`. The result keeps manifest
/// order.
pub fn subset_hours(manifest: &[Utterance], hours: f64, seed: u64) -> Result<Vec<Utterance>, FrontendError> {
    let target = hours * 3600.0;
    let total: f64 = manifest.iter().map(|u| u.duration_s).sum();
    if total + HOUR_EPS < target {
        return Err(FrontendError::InsufficientData { available_s: total, requested_s: target });
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut acc = 0.0;
    let mut keep = vec![false; manifest.len()];
    for i in order {
        if acc + HOUR_EPS >= target {
            break;
        }
        acc += manifest[i].duration_s;
        keep[i] = true;
    }
    Ok(manifest.iter().zip(keep).filter(|(_, k)| *k).map(|(u, _)| u.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize, dir: &Path) -> Vec<Utterance> {
        let feats = dir.join("f.feat");
        FeatureMatrix::new(1, 1, vec![0.0]).save(&feats).unwrap();
        (0..n)
            .map(|i| Utterance {
                id: format!("u{i}"),
                language: "xx".into(),
                source: AudioSource::Features(feats.clone()),
                duration_s: 60.0,
                text: format!("word {i}"),
                ipa: None,
            })
            .collect()
    }

    #[test]
    fn empty_and_ordered() {
        let dir = tempfile::tempdir().unwrap();
        assert!(parse_manifest("".as_bytes(), dir.path()).unwrap().is_empty());
        std::fs::write(dir.path().join("a.feat"), b"").unwrap();
        let text = r#"{"id":"b","lang":"pl","feats":"a.feat","dur_s":1.5,"text":"x"}
{"id":"a","lang":"pl","feats":"a.feat","dur_s":2.0,"text":"y","ipa":"a"}
{"id":"c","lang":"pt","feats":"a.feat","dur_s":0.5,"text":"z"}
"#;
        let m = parse_manifest(text.as_bytes(), dir.path()).unwrap();
        assert_eq!(m.iter().map(|u| u.id.as_str()).collect::<Vec<_>>(), ["b", "a", "c"]);
        assert_eq!(m[1].ipa.as_deref(), Some("a"));
        assert_eq!(m[0].source, AudioSource::Features(dir.path().join("a.feat")));
    }

    #[test]
    fn validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.feat"), b"").unwrap();
        let dup = r#"{"id":"a","lang":"pl","feats":"a.feat","dur_s":1,"text":"x"}
{"id":"a","lang":"pl","feats":"a.feat","dur_s":1,"text":"x"}"#;
        assert!(matches!(parse_manifest(dup.as_bytes(), dir.path()), Err(FrontendError::DuplicateId(id)) if id == "a"));
        let missing = r#"{"id":"a","lang":"pl","dur_s":1,"text":"x"}"#;
        assert!(matches!(parse_manifest(missing.as_bytes(), dir.path()), Err(FrontendError::MissingAudio(_))));
        let absent = r#"{"id":"a","lang":"pl","audio":"nope.wav","dur_s":1,"text":"x"}"#;
        assert!(matches!(parse_manifest(absent.as_bytes(), dir.path()), Err(FrontendError::MissingAudio(_))));
        let garbage = "{\"id\":\"a\",\"lang\":\"pl\",\"feats\":\"a.feat\",\"dur_s\":1,\"text\":\"x\"}\nnot json";
        assert!(matches!(parse_manifest(garbage.as_bytes(), dir.path()), Err(FrontendError::Parse { line: 2, .. })));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(3, dir.path());
        let path = dir.path().join("m.jsonl");
        save_manifest(&path, &m).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("\"feats\":\"f.feat\""));
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn subset_examples() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(10, dir.path());
        assert_eq!(subset_hours(&m, 10.0 / 60.0, 3).unwrap(), m);
        assert_eq!(subset_hours(&m, 5.0 / 60.0, 1).unwrap().len(), 5);
        assert_eq!(subset_hours(&m, 5.0 / 60.0, 9).unwrap(), subset_hours(&m, 5.0 / 60.0, 9).unwrap());
        assert!(matches!(subset_hours(&m, 1.0, 0), Err(FrontendError::InsufficientData { .. })));
    }

    #[test]
    fn subsets_are_nested_for_growing_budgets() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = fixture(20, dir.path());
        for (i, u) in m.iter_mut().enumerate() {
            u.duration_s = 10.0 + (i * 37 % 23) as f64;
        }
        for seed in 0..5 {
            let small: HashSet<String> = subset_hours(&m, 0.03, seed).unwrap().into_iter().map(|u| u.id).collect();
            let large: HashSet<String> = subset_hours(&m, 0.08, seed).unwrap().into_iter().map(|u| u.id).collect();
            assert!(small.is_subset(&large));
        }
    }
}
