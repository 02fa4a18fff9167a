//! Log-mel filterbank frontend.
//!
//! Framing: `T = 1 + floor((n_samples - window) / hop)` for
//! `n_samples >= window`; shorter non-empty inputs are zero-padded to a single
//! frame. Each frame is Hann-windowed, zero-padded to `n_fft`, and its power
//! spectrum is projected onto `n_mels` triangular filters equally spaced on the
//! HTK mel scale between `f_min` and `f_max`. Output values are
//! `ln(max(energy, log_floor))`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, ManifestEntry, Source};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_fft(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// Number of frames produced for `n_samples` input samples.
    pub fn num_frames(&self, n_samples: usize) -> usize {
        let win = self.window_samples();
        match n_samples {
            0 => 0,
            n if n < win => 1,
            n => 1 + (n - win) / self.hop_samples(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hop_samples() == 0 || self.window_samples() == 0 {
            return Err(Error::Config("window and hop must span at least one sample".into()));
        }
        if self.n_mels == 0 || !(self.f_min < self.f_max) || self.f_max > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "mel range [{}, {}] with {} bands is invalid at {} Hz",
                self.f_min, self.f_max, self.n_mels, self.sample_rate
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels × (n_fft/2 + 1)` triangular filter weights.
fn mel_filterbank(cfg: &FrontendConfig) -> Array2<f64> {
    let n_fft = cfg.n_fft();
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > l && f <= c {
            (f - l) / (c - l)
        } else if f > c && f < r {
            (r - f) / (r - c)
        } else {
            0.0
        }
    })
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

struct Frontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    bank: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Frontend {
    fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft());
        Ok(Self {
            cfg: cfg.clone(),
            window: hann(cfg.window_samples()),
            bank: mel_filterbank(cfg),
            fft,
        })
    }

    fn run(&self, samples: &[f32]) -> Result<FeatureMatrix> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("audio has no samples".into()));
        }
        let cfg = &self.cfg;
        let (win, hop, n_fft) = (cfg.window_samples(), cfg.hop_samples(), cfg.n_fft());
        let n_frames = cfg.num_frames(samples.len());
        let n_bins = n_fft / 2 + 1;
        let mut out = Array2::<f32>::zeros((n_frames, cfg.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let start = t * hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = if i < win {
                    samples.get(start + i).copied().unwrap_or(0.0) as f64 * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(s, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, filt) in self.bank.rows().into_iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out[[t, m]] = e.max(cfg.log_floor).ln() as f32;
            }
        }
        FeatureMatrix::new(out)
    }
}

/// Log-mel energies of mono `samples` recorded at `sample_rate`.
pub fn compute_logmel(samples: &[f32], sample_rate: u32, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    if sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "audio is {sample_rate} Hz but the frontend expects {} Hz (no resampler available)",
            cfg.sample_rate
        )));
    }
    Frontend::new(cfg)?.run(samples)
}

/// Read a mono WAV file as `f32` samples in `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Config(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    let samples = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Features for every audio or feature-file entry, computed in parallel and
/// assembled in utterance-id order.
pub fn compute_corpus_features(
    entries: &[ManifestEntry],
    cfg: &FrontendConfig,
) -> Result<BTreeMap<String, FeatureMatrix>> {
    let frontend = Frontend::new(cfg)?;
    let results: Vec<Result<(String, FeatureMatrix)>> = entries
        .par_iter()
        .map(|e| {
            let Source::Path(path) = &e.source else {
                return Err(Error::Config(format!("utterance {} has no source path", e.utterance_id)));
            };
            let feat = if path.extension().is_some_and(|x| x == "feat") {
                super::read_feature_file(path)?
            } else {
                let (samples, rate) = read_wav(path)?;
                if rate != cfg.sample_rate {
                    return Err(Error::Config(format!(
                        "{}: {rate} Hz, frontend expects {} Hz",
                        path.display(),
                        cfg.sample_rate
                    )));
                }
                frontend.run(&samples)?
            };
            Ok((e.utterance_id.clone(), feat))
        })
        .collect();
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64, rate: u32) -> Vec<f32> {
        let n = (seconds * rate as f64) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32 * 0.5)
            .collect()
    }

    #[test]
    fn one_second_frame_count() {
        let cfg = FrontendConfig::default();
        // 1 + floor((16000 - 400) / 160) = 98
        let f = compute_logmel(&tone(440.0, 1.0, 16_000), 16_000, &cfg).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.dim(), 80);
    }

    #[test]
    fn silence_hits_log_floor() {
        let cfg = FrontendConfig::default();
        let f = compute_logmel(&vec![0.0; 8000], 16_000, &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(f.frames.iter().all(|&x| x == floor));
    }

    #[test]
    fn deterministic() {
        let cfg = FrontendConfig::default();
        let audio = tone(1234.0, 0.3, 16_000);
        let a = compute_logmel(&audio, 16_000, &cfg).unwrap();
        let b = compute_logmel(&audio, 16_000, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tone_energy_peaks_near_its_band() {
        let cfg = FrontendConfig::default();
        let f = compute_logmel(&tone(1000.0, 0.5, 16_000), 16_000, &cfg).unwrap();
        let row = f.frames.row(10);
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let lo = hz_to_mel(0.0);
        let hi = hz_to_mel(8000.0);
        let centre = |m: usize| mel_to_hz(lo + (hi - lo) * (m + 1) as f64 / 81.0);
        assert!((centre(peak) - 1000.0).abs() < 120.0, "peak band centre {}", centre(peak));
    }

    #[test]
    fn errors() {
        let cfg = FrontendConfig::default();
        assert!(matches!(compute_logmel(&[], 16_000, &cfg), Err(Error::EmptyInput(_))));
        assert!(matches!(compute_logmel(&[0.0; 100], 8_000, &cfg), Err(Error::Config(_))));
        let short = compute_logmel(&[0.1; 100], 16_000, &cfg).unwrap();
        assert_eq!(short.num_frames(), 1);
    }
}
