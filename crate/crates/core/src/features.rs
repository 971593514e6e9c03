//! Mel-spectrogram and MFCC features for one-second segments.
//!
//! A segment of 8000 samples becomes a 29×24 matrix: 29 STFT frames (1000
//! sample Hann frames, 250 sample hop, zero-padded to a 1024-point FFT) by
//! 24 Slaney-style mel bands spanning 0..4000 Hz. The flattened 696-value
//! vector is time-major: entry `(t, b)` sits at `t * 24 + b`.

use std::fmt::Write as _;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{SecondSegment, SAMPLE_RATE, SEGMENT_LEN};

pub const N_FRAMES: usize = 29;
pub const N_MELS: usize = 24;
pub const N_FEATURES: usize = N_FRAMES * N_MELS;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("invalid feature configuration: {0}")]
    ConfigInvalid(String),
    #[error("expected a {expected:?} matrix, got {found:?}")]
    WrongMode {
        expected: FeatureMode,
        found: FeatureMode,
    },
    #[error("expected {N_FEATURES} values, got {0}")]
    WrongLength(usize),
    #[error("segment must hold {SEGMENT_LEN} samples, got {0}")]
    WrongSegmentLength(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    #[serde(rename = "mel")]
    MelPower,
    Mfcc,
}

impl FeatureMode {
    pub fn as_u8(self) -> u8 {
        match self {
            FeatureMode::MelPower => 0,
            FeatureMode::Mfcc => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(FeatureMode::MelPower),
            1 => Some(FeatureMode::Mfcc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::MelPower => "mel",
            FeatureMode::Mfcc => "mfcc",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mel" => Ok(FeatureMode::MelPower),
            "mfcc" => Ok(FeatureMode::Mfcc),
            other => Err(format!("unknown feature mode {other:?} (expected mel|mfcc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_length: 1000,
            hop_length: 250,
            fft_size: 1024,
        }
    }
}

impl StftConfig {
    /// Frames that fit entirely inside `len` samples.
    pub fn frames_in(&self, len: usize) -> usize {
        if len < self.frame_length {
            0
        } else {
            (len - self.frame_length) / self.hop_length + 1
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub f_min: f64,
    pub f_max: f64,
    /// Added to mel power before the log in the MFCC path.
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            f_min: 0.0,
            f_max: 4000.0,
            floor: 1e-10,
        }
    }
}

/// 29×24 feature matrix for one second of audio.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f32>,
    mode: FeatureMode,
}

impl FeatureMatrix {
    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn get(&self, t: usize, band: usize) -> f32 {
        self.values[t * N_MELS + band]
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * N_MELS..(t + 1) * N_MELS]
    }

    /// Time-major view of the 696 values.
    pub fn as_flat(&self) -> &[f32] {
        &self.values
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.values.clone()
    }

    pub fn unflatten(values: Vec<f32>, mode: FeatureMode) -> Result<Self, FeatureError> {
        if values.len() != N_FEATURES {
            return Err(FeatureError::WrongLength(values.len()));
        }
        Ok(FeatureMatrix { values, mode })
    }

    /// One CSV row per frame: `frame,b0,...,b23`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame");
        for b in 0..N_MELS {
            let _ = write!(out, ",b{b}");
        }
        out.push('\n');
        for t in 0..N_FRAMES {
            let _ = write!(out, "{t}");
            for v in self.row(t) {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Short-time power spectrum with a periodic Hann window.
#[derive(Clone)]
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn RealToComplex<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("config", &self.config).finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self, FeatureError> {
        if config.frame_length == 0 || config.hop_length == 0 {
            return Err(FeatureError::ConfigInvalid(
                "frame and hop length must be positive".into(),
            ));
        }
        if config.frame_length > config.fft_size {
            return Err(FeatureError::ConfigInvalid(format!(
                "frame length {} exceeds FFT size {}",
                config.frame_length, config.fft_size
            )));
        }
        let n = config.frame_length;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        if !config.fft_size.is_multiple_of(2) {
            return Err(FeatureError::ConfigInvalid(format!(
                "FFT size {} must be even",
                config.fft_size
            )));
        }
        let fft = RealFftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(Stft {
            config,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    /// Power spectra of every full frame in `samples`, frame-major
    /// (`frames × n_bins`). Frame `f` covers `[f·hop, f·hop + frame_length)`.
    pub fn power_frames(&self, samples: &[f32]) -> Vec<f64> {
        let n_frames = self.config.frames_in(samples.len());
        let n_bins = self.n_bins();
        let mut out = Vec::with_capacity(n_frames * n_bins);
        let mut buf = self.fft.make_input_vec();
        let mut spectrum = self.fft.make_output_vec();
        let mut scratch = self.fft.make_scratch_vec();
        for f in 0..n_frames {
            let start = f * self.config.hop_length;
            let frame = &samples[start..start + self.config.frame_length];
            for (slot, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = s as f64 * w;
            }
            buf[self.config.frame_length..].fill(0.0);
            self.fft
                .process_with_scratch(&mut buf, &mut spectrum, &mut scratch)
                .expect("buffer sizes come from the plan");
            out.extend(spectrum[..n_bins].iter().map(|c: &Complex<f64>| c.norm_sqr()));
        }
        out
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Sparse triangular mel filter.
#[derive(Debug, Clone)]
struct MelBand {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Area-normalized (Slaney) triangular filterbank.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    bands: Vec<MelBand>,
    /// Band edges in Hz: `N_MELS + 2` points, band `m` peaks at `edges[m + 1]`.
    edges_hz: Vec<f64>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(
        mel: &MelConfig,
        sample_rate: u32,
        fft_size: usize,
    ) -> Result<Self, FeatureError> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(mel.f_min >= 0.0 && mel.f_min < mel.f_max) {
            return Err(FeatureError::ConfigInvalid(format!(
                "need 0 <= f_min < f_max, got {} and {}",
                mel.f_min, mel.f_max
            )));
        }
        if mel.f_max > nyquist {
            return Err(FeatureError::ConfigInvalid(format!(
                "f_max {} Hz above Nyquist {} Hz",
                mel.f_max, nyquist
            )));
        }
        if mel.floor.is_nan() || mel.floor <= 0.0 {
            return Err(FeatureError::ConfigInvalid("floor must be positive".into()));
        }
        let n_bins = fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(mel.f_min), hz_to_mel(mel.f_max));
        let edges_hz: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / fft_size as f64;

        let mut bands = Vec::with_capacity(N_MELS);
        for m in 0..N_MELS {
            let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let norm = 2.0 / (right - left);
            let mut first_bin = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = bin_hz(k);
                let rising = (f - left) / (center - left);
                let falling = (right - f) / (right - center);
                let w = rising.min(falling).max(0.0) * norm;
                if w > 0.0 {
                    let first = *first_bin.get_or_insert(k);
                    weights.resize(k - first, 0.0);
                    weights.push(w);
                }
            }
            let Some(first_bin) = first_bin else {
                return Err(FeatureError::ConfigInvalid(format!(
                    "mel band {m} ({left:.1}..{right:.1} Hz) covers no FFT bin"
                )));
            };
            bands.push(MelBand { first_bin, weights });
        }
        Ok(MelFilterbank {
            bands,
            edges_hz,
            n_bins,
        })
    }

    /// Center frequency of each band in Hz.
    pub fn centers_hz(&self) -> Vec<f64> {
        self.edges_hz[1..=N_MELS].to_vec()
    }

    /// Dense `N_MELS × n_bins` weight matrix.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.bands
            .iter()
            .map(|b| {
                let mut row = vec![0.0; self.n_bins];
                row[b.first_bin..b.first_bin + b.weights.len()].copy_from_slice(&b.weights);
                row
            })
            .collect()
    }

    fn apply(&self, power: &[f64], out: &mut [f32]) {
        for (slot, band) in out.iter_mut().zip(&self.bands) {
            let spectrum = &power[band.first_bin..band.first_bin + band.weights.len()];
            let e: f64 = spectrum.iter().zip(&band.weights).map(|(p, w)| p * w).sum();
            *slot = e as f32;
        }
    }
}

/// Orthonormal DCT-II matrix, `N_MELS × N_MELS`, row k = coefficient k.
fn dct_matrix() -> Vec<f64> {
    let n = N_MELS as f64;
    let mut m = vec![0.0; N_MELS * N_MELS];
    for k in 0..N_MELS {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..N_MELS {
            m[k * N_MELS + i] =
                scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos();
        }
    }
    m
}

/// Precomputed feature pipeline: STFT plan, mel filterbank and DCT matrix.
///
/// Immutable once built; share one instance across threads.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stft: Stft,
    mel: MelConfig,
    filterbank: MelFilterbank,
    dct: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(stft: StftConfig, mel: MelConfig) -> Result<Self, FeatureError> {
        if stft.frame_length > SEGMENT_LEN {
            return Err(FeatureError::ConfigInvalid(format!(
                "frame length {} longer than one second",
                stft.frame_length
            )));
        }
        let frames = stft.frames_in(SEGMENT_LEN);
        if frames != N_FRAMES {
            return Err(FeatureError::ConfigInvalid(format!(
                "frame length {} / hop {} gives {frames} frames per second, need {N_FRAMES}",
                stft.frame_length, stft.hop_length
            )));
        }
        let filterbank = MelFilterbank::new(&mel, SAMPLE_RATE, stft.fft_size)?;
        Ok(FeatureExtractor {
            stft: Stft::new(stft)?,
            mel,
            filterbank,
            dct: dct_matrix(),
        })
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn mel_config(&self) -> &MelConfig {
        &self.mel
    }

    pub fn mel_spectrogram(&self, segment: &SecondSegment) -> FeatureMatrix {
        self.mel_spectrogram_samples(segment.samples())
            .expect("SecondSegment always holds one second")
    }

    pub fn mel_spectrogram_samples(&self, samples: &[f32]) -> Result<FeatureMatrix, FeatureError> {
        if samples.len() != SEGMENT_LEN {
            return Err(FeatureError::WrongSegmentLength(samples.len()));
        }
        let power = self.stft.power_frames(samples);
        let n_bins = self.stft.n_bins();
        let mut values = vec![0.0f32; N_FEATURES];
        for (frame, out) in power.chunks_exact(n_bins).zip(values.chunks_exact_mut(N_MELS)) {
            self.filterbank.apply(frame, out);
        }
        Ok(FeatureMatrix {
            values,
            mode: FeatureMode::MelPower,
        })
    }

    /// Log-compresses each frame and applies the orthonormal DCT-II across bands.
    pub fn mfcc(&self, mel: &FeatureMatrix) -> Result<FeatureMatrix, FeatureError> {
        if mel.mode != FeatureMode::MelPower {
            return Err(FeatureError::WrongMode {
                expected: FeatureMode::MelPower,
                found: mel.mode,
            });
        }
        let mut values = vec![0.0f32; N_FEATURES];
        let mut logs = [0.0f64; N_MELS];
        for (row, out) in mel.values.chunks_exact(N_MELS).zip(values.chunks_exact_mut(N_MELS)) {
            for (l, &p) in logs.iter_mut().zip(row) {
                *l = (p as f64 + self.mel.floor).ln();
            }
            for (k, slot) in out.iter_mut().enumerate() {
                let basis = &self.dct[k * N_MELS..(k + 1) * N_MELS];
                *slot = basis.iter().zip(&logs).map(|(b, l)| b * l).sum::<f64>() as f32;
            }
        }
        Ok(FeatureMatrix {
            values,
            mode: FeatureMode::Mfcc,
        })
    }

    pub fn extract(&self, segment: &SecondSegment, mode: FeatureMode) -> FeatureMatrix {
        self.extract_samples(segment.samples(), mode)
            .expect("SecondSegment always holds one second")
    }

    /// Features in the requested mode from exactly one second of 8 kHz samples.
    pub fn extract_samples(
        &self,
        samples: &[f32],
        mode: FeatureMode,
    ) -> Result<FeatureMatrix, FeatureError> {
        let mel = self.mel_spectrogram_samples(samples)?;
        match mode {
            FeatureMode::MelPower => Ok(mel),
            FeatureMode::Mfcc => self.mfcc(&mel),
        }
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::new(StftConfig::default(), MelConfig::default())
            .expect("default feature configuration is valid")
    }
}
