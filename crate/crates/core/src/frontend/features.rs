//! Log-mel filterbank features and the on-disk feature cache.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::FrontendError;

const FEAT_MAGIC: &[u8; 4] = b"FEAT";

/// STFT / filterbank settings. Defaults: 25 ms Hann window, 10 ms hop at
/// 16 kHz, 80 HTK mel bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub window: usize,
    pub hop: usize,
    pub num_mels: usize,
    pub floor: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, n_fft: 512, window: 400, hop: 160, num_mels: 80, floor: 1e-10 }
    }
}

impl LogMelConfig {
    pub fn validate(&self) -> Result<(), FrontendError> {
        let bad = |m: &str| Err(FrontendError::BadConfig(m.to_string()));
        if self.hop == 0 || self.hop > self.window {
            return bad("hop must be in 1..=window");
        }
        if self.num_mels < 2 {
            return bad("num_mels must be at least 2");
        }
        if self.n_fft < self.window {
            return bad("n_fft must be >= window");
        }
        if !(self.floor > 0.0) {
            return bad("floor must be positive");
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive");
        }
        Ok(())
    }

    pub fn frame_shift_ms(&self) -> f64 {
        1000.0 * self.hop as f64 / self.sample_rate as f64
    }

    pub fn frame_length_ms(&self) -> f64 {
        1000.0 * self.window as f64 / self.sample_rate as f64
    }

    /// Short digest stored in checkpoints so feature mismatches are detectable.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `num_mels` triangular filters spanning
/// 0..Nyquist on the HTK mel scale.
pub fn mel_center_frequencies(num_mels: usize, sample_rate: u32) -> Vec<f64> {
    let edges = mel_edges(num_mels, sample_rate);
    edges[1..=num_mels].to_vec()
}

fn mel_edges(num_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..num_mels + 2).map(|i| mel_to_hz(top * i as f64 / (num_mels + 1) as f64)).collect()
}

/// `num_mels × (n_fft/2+1)` triangular weights, peak 1 at each center.
pub fn mel_filterbank(num_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_edges(num_mels, sample_rate);
    let bins = n_fft / 2 + 1;
    (0..num_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * sample_rate as f64 / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// A `frames × dim` row-major matrix of float32 features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(frames * dim, data.len(), "feature data length");
        Self { frames, dim, data, frame_shift_ms: 10.0, frame_length_ms: 25.0 }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(FEAT_MAGIC)?;
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, FrontendError> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| FrontendError::BadFeatureFile("short header".into()))?;
        if &head[..4] != FEAT_MAGIC {
            return Err(FrontendError::BadFeatureFile("bad magic".into()));
        }
        let frames = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; frames * dim * 4];
        r.read_exact(&mut bytes).map_err(|_| FrontendError::BadFeatureFile("truncated body".into()))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self::new(frames, dim, data))
    }

    pub fn save(&self, path: &Path) -> Result<(), FrontendError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FrontendError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct LogMel {
    cfg: LogMelConfig,
    fft: Arc<dyn Fft<f64>>,
    hann: Vec<f64>,
    bank: Vec<Vec<(usize, f64)>>,
}

impl LogMel {
    pub fn new(cfg: LogMelConfig) -> Result<Self, FrontendError> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let hann = (0..cfg.window)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.window as f64).cos())
            .collect();
        let bank = mel_filterbank(cfg.num_mels, cfg.n_fft, cfg.sample_rate)
            .into_iter()
            .map(|row| row.into_iter().enumerate().filter(|(_, w)| *w > 0.0).collect())
            .collect();
        Ok(Self { cfg, fft, hann, bank })
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.cfg
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.cfg.window {
            0
        } else {
            1 + (num_samples - self.cfg.window) / self.cfg.hop
        }
    }

    pub fn compute(&self, samples: &[f32]) -> Result<FeatureMatrix, FrontendError> {
        let c = &self.cfg;
        if samples.len() < c.window {
            return Err(FrontendError::TooShort { samples: samples.len(), window: c.window });
        }
        let frames = self.num_frames(samples.len());
        let bins = c.n_fft / 2 + 1;
        let mut data = Vec::with_capacity(frames * c.num_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
        let mut mag = vec![0.0f64; bins];
        for t in 0..frames {
            let start = t * c.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < c.window { samples[start + i] as f64 * self.hann[i] } else { 0.0 };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (m, z) in mag.iter_mut().zip(&buf) {
                *m = z.norm();
            }
            for filt in &self.bank {
                let e: f64 = filt.iter().map(|&(b, w)| w * mag[b]).sum();
                data.push(e.max(c.floor).ln() as f32);
            }
        }
        let mut fm = FeatureMatrix::new(frames, c.num_mels, data);
        fm.frame_shift_ms = c.frame_shift_ms();
        fm.frame_length_ms = c.frame_length_ms();
        Ok(fm)
    }
}

/// Magnitude STFT → HTK mel filterbank → natural log with floor.
pub fn compute_logmel(samples: &[f32], rate: u32, cfg: &LogMelConfig) -> Result<FeatureMatrix, FrontendError> {
    if rate == 0 {
        return Err(FrontendError::BadConfig("sample rate must be positive".into()));
    }
    let cfg = LogMelConfig { sample_rate: rate, ..cfg.clone() };
    LogMel::new(cfg)?.compute(samples)
}

/// Reads mono 16-bit or float WAV into `[-1, 1]` samples.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32), FrontendError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| FrontendError::Audio(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(FrontendError::Audio(format!("{}: expected mono audio", path.display())));
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader.samples::<i32>().map(|s| s.map(|v| v as f32 / scale)).collect::<Result<Vec<_>, _>>()
        }
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<Vec<_>, _>>(),
    }
    .map_err(|e| FrontendError::Audio(e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: &Path, samples: &[f32], rate: u32) -> Result<(), FrontendError> {
    let spec = hound::WavSpec { channels: 1, sample_rate: rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| FrontendError::Audio(e.to_string()))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| FrontendError::Audio(e.to_string()))?;
    }
    w.finalize().map_err(|e| FrontendError::Audio(e.to_string()))
}
