//! Landmark-hash fingerprint index for known announcements.
//!
//! Peaks are picked from the log-magnitude spectrogram computed with the same
//! STFT configuration as the classifier features (1000-sample frames, 250-sample
//! hop, 1024-point FFT, so 32 frames per second). Pairs of peaks become 32-bit
//! hashes; a query votes for `(announcement, time offset)` pairs and the best
//! offset bucket wins.
//!
//! Snapshot layout (`.fpidx`, little-endian):
//!
//! ```text
//! "EMFP" | version u16
//! config: neighborhood_frames u8 | neighborhood_bins u8 | threshold_sigmas f64
//!         | max_peaks_per_second u16 | fan_out u8 | max_delta_frame u8
//!         | max_delta_band u16 | min_votes u32 | offset_tolerance u8 | query_shifts u8
//! clips:  count u32, sorted by id; per clip: id (u32 len + utf-8) | n_frames u32
//!         | n_landmarks u32 | n_landmarks × (hash u32 | anchor_frame u32)
//! crc32 u32 over every preceding byte
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError, SAMPLE_RATE};
use crate::container::{ContainerError, Reader, Writer};
use crate::features::{Stft, StftConfig};
use crate::sip::{AnnouncementRegistry, SipCode};

pub const INDEX_MAGIC: &[u8; 4] = b"EMFP";
pub const INDEX_VERSION: u16 = 1;

/// Highest spectrogram bin usable as a band (the 9-bit hash field).
const MAX_BAND: usize = 511;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FingerprintError {
    #[error("audio too short: {samples} samples, need at least {required}")]
    TooShort { samples: usize, required: usize },
    #[error("announcement id {0:?} is not in the registry")]
    UnknownAnnouncementId(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("invalid fingerprint config: {0}")]
    InvalidConfig(String),
    #[error("index format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("index checksum failure (truncated or corrupted file)")]
    ChecksumFailure,
    #[error("malformed index: {0}")]
    Malformed(String),
    #[error("{0}")]
    Io(String),
}

impl From<ContainerError> for FingerprintError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::VersionMismatch { found, expected } => {
                FingerprintError::VersionMismatch { found, expected }
            }
            ContainerError::ChecksumFailure => FingerprintError::ChecksumFailure,
            other => FingerprintError::Malformed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerprintConfig {
    /// Half-extent of the peak neighborhood in frames (2 gives 5 frames).
    pub neighborhood_frames: u8,
    /// Half-extent of the peak neighborhood in bins (2 gives 5 bins).
    pub neighborhood_bins: u8,
    /// Peaks must exceed the frame's mean log magnitude by this many deviations.
    pub threshold_sigmas: f64,
    pub max_peaks_per_second: u16,
    pub fan_out: u8,
    pub max_delta_frame: u8,
    pub max_delta_band: u16,
    pub min_votes: u32,
    /// Votes within this many frames of an offset count toward it.
    pub offset_tolerance: u8,
    /// Number of sub-hop analysis grids a query is evaluated on.
    pub query_shifts: u8,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        FingerprintConfig {
            neighborhood_frames: 2,
            neighborhood_bins: 2,
            threshold_sigmas: 2.0,
            max_peaks_per_second: 30,
            fan_out: 5,
            max_delta_frame: 63,
            max_delta_band: 31,
            min_votes: 5,
            offset_tolerance: 2,
            query_shifts: 4,
        }
    }
}

impl FingerprintConfig {
    pub fn validate(&self) -> Result<(), FingerprintError> {
        let bad = |m: &str| Err(FingerprintError::InvalidConfig(m.to_string()));
        if self.max_delta_frame == 0 {
            return bad("max_delta_frame must be at least 1");
        }
        if self.max_delta_band as usize > MAX_BAND {
            return bad("max_delta_band must be at most 511");
        }
        if self.fan_out == 0 || self.max_peaks_per_second == 0 {
            return bad("fan_out and max_peaks_per_second must be positive");
        }
        if self.query_shifts == 0 {
            return bad("query_shifts must be at least 1");
        }
        if !(self.threshold_sigmas.is_finite() && self.threshold_sigmas >= 0.0) {
            return bad("threshold_sigmas must be a non-negative number");
        }
        Ok(())
    }
}

/// 32-bit landmark hash: `anchor_band(9) | target_band(9) | delta_frame(8) | reserved(6)`,
/// most significant field first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FingerprintHash(pub u32);

impl FingerprintHash {
    /// `None` if a field does not fit its width.
    pub fn pack(anchor_band: u16, target_band: u16, delta_frame: u8, reserved: u8) -> Option<Self> {
        if anchor_band > 0x1ff || target_band > 0x1ff || reserved > 0x3f {
            return None;
        }
        Some(FingerprintHash(
            (anchor_band as u32) << 23
                | (target_band as u32) << 14
                | (delta_frame as u32) << 6
                | reserved as u32,
        ))
    }

    pub fn anchor_band(self) -> u16 {
        (self.0 >> 23) as u16 & 0x1ff
    }

    pub fn target_band(self) -> u16 {
        (self.0 >> 14) as u16 & 0x1ff
    }

    pub fn delta_frame(self) -> u8 {
        (self.0 >> 6) as u8
    }

    pub fn reserved(self) -> u8 {
        self.0 as u8 & 0x3f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub frame: u32,
    pub band: u16,
    /// Log magnitude at the peak.
    pub strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Landmark {
    pub anchor_frame: u32,
    pub anchor_band: u16,
    pub target_frame: u32,
    pub target_band: u16,
}

impl Landmark {
    pub fn delta_frame(&self) -> u32 {
        self.target_frame - self.anchor_frame
    }

    pub fn hash(&self) -> FingerprintHash {
        FingerprintHash::pack(
            self.anchor_band,
            self.target_band,
            self.delta_frame() as u8,
            0,
        )
        .expect("landmark fields fit the hash")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Best-scoring candidate, present whenever any hash matched.
    pub announcement_id: Option<String>,
    pub sip_code: Option<SipCode>,
    /// Index frame minus query frame of the winning bucket.
    pub offset_frames: i64,
    pub offset_seconds: f64,
    pub vote_count: u32,
    pub matched: bool,
}

/// Peak picking and landmark pairing; shared by indexing and querying.
#[derive(Debug, Clone)]
pub struct LandmarkExtractor {
    config: FingerprintConfig,
    stft: Stft,
}

impl LandmarkExtractor {
    pub fn new(config: FingerprintConfig) -> Result<Self, FingerprintError> {
        config.validate()?;
        let stft = Stft::new(StftConfig::default()).expect("default STFT config is valid");
        Ok(LandmarkExtractor { config, stft })
    }

    pub fn config(&self) -> &FingerprintConfig {
        &self.config
    }

    pub fn frames_per_second(&self) -> f64 {
        SAMPLE_RATE as f64 / self.stft.config().hop_length as f64
    }

    pub fn hop_length(&self) -> usize {
        self.stft.config().hop_length
    }

    /// Spectral peaks of an 8 kHz buffer of at least one second, ordered by
    /// `(frame, band)`.
    pub fn extract_peaks(&self, audio: &AudioBuffer) -> Result<Vec<Peak>, FingerprintError> {
        audio.require_8k()?;
        self.peaks_of(audio.samples())
    }

    pub(crate) fn peaks_of(&self, samples: &[f32]) -> Result<Vec<Peak>, FingerprintError> {
        let required = SAMPLE_RATE as usize;
        if samples.len() < required {
            return Err(FingerprintError::TooShort {
                samples: samples.len(),
                required,
            });
        }
        let n_bins = self.stft.n_bins();
        let n_frames = self.stft.config().frames_in(samples.len());
        let logmag: Vec<f64> = self
            .stft
            .power_frames(samples)
            .into_iter()
            .map(|p| 0.5 * (p + LOG_FLOOR).ln())
            .collect();
        let at = |f: usize, b: usize| logmag[f * n_bins + b];
        let bands = 1..=MAX_BAND.min(n_bins - 1);
        let n_band = bands.clone().count() as f64;
        let rf = self.config.neighborhood_frames as usize;
        let rb = self.config.neighborhood_bins as usize;

        let mut candidates = Vec::new();
        for f in 0..n_frames {
            let row = &logmag[f * n_bins..(f + 1) * n_bins];
            let mean = bands.clone().map(|b| row[b]).sum::<f64>() / n_band;
            let var = bands.clone().map(|b| (row[b] - mean).powi(2)).sum::<f64>() / n_band;
            let threshold = mean + self.config.threshold_sigmas * var.sqrt();
            for b in bands.clone() {
                let v = row[b];
                if v <= threshold {
                    continue;
                }
                let is_max = (f.saturating_sub(rf)..=(f + rf).min(n_frames - 1)).all(|g| {
                    (b.saturating_sub(rb)..=(b + rb).min(n_bins - 1)).all(|c| at(g, c) <= v)
                });
                if is_max {
                    candidates.push(Peak {
                        frame: f as u32,
                        band: b as u16,
                        strength: v,
                    });
                }
            }
        }

        // Keep the strongest peaks within each one-second block of frames.
        let block = self.frames_per_second().round() as u32;
        let cap = self.config.max_peaks_per_second as usize;
        let mut peaks = Vec::with_capacity(candidates.len());
        for chunk in candidates.chunk_by_mut(|a, b| a.frame / block == b.frame / block) {
            chunk.sort_by(|a, b| {
                b.strength
                    .total_cmp(&a.strength)
                    .then(a.frame.cmp(&b.frame))
                    .then(a.band.cmp(&b.band))
            });
            let n = cap.min(chunk.len());
            let keep = &mut chunk[..n];
            keep.sort_by_key(|p| (p.frame, p.band));
            peaks.extend_from_slice(keep);
        }
        Ok(peaks)
    }

    /// Pairs every peak with up to `fan_out` later peaks in its target zone.
    pub fn landmarks(&self, peaks: &[Peak]) -> Vec<Landmark> {
        let c = &self.config;
        let mut out = Vec::with_capacity(peaks.len() * c.fan_out as usize);
        for (i, anchor) in peaks.iter().enumerate() {
            let mut paired = 0;
            for target in &peaks[i + 1..] {
                let df = target.frame - anchor.frame;
                if df > c.max_delta_frame as u32 {
                    break;
                }
                if df == 0 || (target.band as i32 - anchor.band as i32).unsigned_abs()
                    > c.max_delta_band as u32
                {
                    continue;
                }
                out.push(Landmark {
                    anchor_frame: anchor.frame,
                    anchor_band: anchor.band,
                    target_frame: target.frame,
                    target_band: target.band,
                });
                paired += 1;
                if paired == c.fan_out {
                    break;
                }
            }
        }
        out
    }

    pub(crate) fn hashes_of(&self, samples: &[f32]) -> Result<Vec<(u32, u32)>, FingerprintError> {
        let peaks = self.peaks_of(samples)?;
        Ok(self
            .landmarks(&peaks)
            .iter()
            .map(|l| (l.hash().0, l.anchor_frame))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Clip {
    slot: u32,
    n_frames: u32,
    landmarks: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Posting {
    slot: u32,
    frame: u32,
}

/// In-memory inverted index from landmark hash to `(announcement, anchor frame)`.
///
/// Queries take `&self` and may run concurrently; `add` needs `&mut self`.
#[derive(Debug, Clone)]
pub struct FingerprintIndex {
    registry: Arc<AnnouncementRegistry>,
    extractor: LandmarkExtractor,
    clips: BTreeMap<String, Clip>,
    slot_ids: Vec<String>,
    postings: HashMap<u32, Vec<Posting>>,
}

impl FingerprintIndex {
    pub fn new(
        registry: Arc<AnnouncementRegistry>,
        config: FingerprintConfig,
    ) -> Result<Self, FingerprintError> {
        Ok(FingerprintIndex {
            registry,
            extractor: LandmarkExtractor::new(config)?,
            clips: BTreeMap::new(),
            slot_ids: Vec::new(),
            postings: HashMap::new(),
        })
    }

    pub fn with_defaults(registry: Arc<AnnouncementRegistry>) -> Self {
        Self::new(registry, FingerprintConfig::default()).expect("default config is valid")
    }

    pub fn config(&self) -> &FingerprintConfig {
        self.extractor.config()
    }

    pub fn extractor(&self) -> &LandmarkExtractor {
        &self.extractor
    }

    pub fn registry(&self) -> &Arc<AnnouncementRegistry> {
        &self.registry
    }

    /// Overrides the vote threshold used by `query`.
    pub fn set_min_votes(&mut self, min_votes: u32) {
        self.extractor.config.min_votes = min_votes;
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn announcement_ids(&self) -> impl Iterator<Item = &str> {
        self.clips.keys().map(String::as_str)
    }

    /// Total number of stored `(hash, announcement, frame)` entries.
    pub fn hash_count(&self) -> usize {
        self.postings.values().map(Vec::len).sum()
    }

    pub fn distinct_hashes(&self) -> usize {
        self.postings.len()
    }

    /// Indexes `audio` under `announcement_id`, replacing any earlier entry
    /// for the same id.
    pub fn add(&mut self, announcement_id: &str, audio: &AudioBuffer) -> Result<(), FingerprintError> {
        if !self.registry.contains(announcement_id) {
            return Err(FingerprintError::UnknownAnnouncementId(announcement_id.to_string()));
        }
        audio.require_8k()?;
        let landmarks = self.extractor.hashes_of(audio.samples())?;
        let n_frames = self.extractor.stft.config().frames_in(audio.len()) as u32;
        self.insert(announcement_id.to_string(), n_frames, landmarks);
        Ok(())
    }

    fn insert(&mut self, id: String, n_frames: u32, landmarks: Vec<(u32, u32)>) {
        let slot = match self.clips.remove(&id) {
            Some(old) => {
                for &(hash, _) in &old.landmarks {
                    if let Some(list) = self.postings.get_mut(&hash) {
                        list.retain(|p| p.slot != old.slot);
                        if list.is_empty() {
                            self.postings.remove(&hash);
                        }
                    }
                }
                old.slot
            }
            None => {
                self.slot_ids.push(id.clone());
                (self.slot_ids.len() - 1) as u32
            }
        };
        for &(hash, frame) in &landmarks {
            self.postings.entry(hash).or_default().push(Posting { slot, frame });
        }
        self.clips.insert(
            id,
            Clip {
                slot,
                n_frames,
                landmarks,
            },
        );
    }

    /// Query hashes over all configured sub-hop shifts, deduplicated, with
    /// anchor frames expressed on the unshifted grid.
    fn query_hashes(&self, samples: &[f32]) -> Result<Vec<(u32, u32)>, FingerprintError> {
        let shifts = self.config().query_shifts as usize;
        let hop = self.extractor.hop_length();
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in 0..shifts {
            let start = s * hop / shifts;
            let part = &samples[start.min(samples.len())..];
            if s > 0 && part.len() < SAMPLE_RATE as usize {
                break;
            }
            let frame_shift = u32::from(2 * start >= hop);
            for (hash, frame) in self.extractor.hashes_of(part)? {
                let key = (hash, frame + frame_shift);
                if seen.insert(key) {
                    out.push(key);
                }
            }
        }
        Ok(out)
    }

    pub fn query(&self, audio: &AudioBuffer) -> Result<MatchResult, FingerprintError> {
        audio.require_8k()?;
        self.query_samples(audio.samples())
    }

    pub fn query_samples(&self, samples: &[f32]) -> Result<MatchResult, FingerprintError> {
        let hashes = self.query_hashes(samples)?;
        let mut votes: HashMap<(u32, i64), u32> = HashMap::new();
        for (hash, qframe) in hashes {
            if let Some(list) = self.postings.get(&hash) {
                for p in list {
                    *votes
                        .entry((p.slot, p.frame as i64 - qframe as i64))
                        .or_default() += 1;
                }
            }
        }
        let tol = self.config().offset_tolerance as i64;
        let mut best: Option<(u32, &str, i64, u32)> = None;
        for &(slot, offset) in votes.keys() {
            let score: u32 = (-tol..=tol)
                .filter_map(|d| votes.get(&(slot, offset + d)))
                .sum();
            let id = self.slot_ids[slot as usize].as_str();
            let better = match best {
                None => true,
                Some((bs, bid, boff, _)) => {
                    score > bs || (score == bs && (id, offset) < (bid, boff))
                }
            };
            if better {
                best = Some((score, id, offset, slot));
            }
        }
        // report the most-voted offset inside the winning window
        let best = best.map(|(score, id, offset, slot)| {
            let count = |o: i64| votes.get(&(slot, o)).copied().unwrap_or(0);
            let mut peak = offset;
            for d in 1..=tol {
                for o in [offset - d, offset + d] {
                    if count(o) > count(peak) {
                        peak = o;
                    }
                }
            }
            (score, id, peak)
        });
        let fps = self.extractor.frames_per_second();
        Ok(match best {
            None => MatchResult {
                announcement_id: None,
                sip_code: None,
                offset_frames: 0,
                offset_seconds: 0.0,
                vote_count: 0,
                matched: false,
            },
            Some((score, id, offset)) => MatchResult {
                announcement_id: Some(id.to_string()),
                sip_code: self.registry.lookup(id).cloned(),
                offset_frames: offset,
                offset_seconds: offset as f64 / fps,
                vote_count: score,
                matched: score >= self.config().min_votes,
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let mut w = Writer::with_header(INDEX_MAGIC, INDEX_VERSION);
        w.u8(c.neighborhood_frames);
        w.u8(c.neighborhood_bins);
        w.f64(c.threshold_sigmas);
        w.u16(c.max_peaks_per_second);
        w.u8(c.fan_out);
        w.u8(c.max_delta_frame);
        w.u16(c.max_delta_band);
        w.u32(c.min_votes);
        w.u8(c.offset_tolerance);
        w.u8(c.query_shifts);
        w.u32(self.clips.len() as u32);
        for (id, clip) in &self.clips {
            w.str(id);
            w.u32(clip.n_frames);
            w.u32(clip.landmarks.len() as u32);
            for &(hash, frame) in &clip.landmarks {
                w.u32(hash);
                w.u32(frame);
            }
        }
        w.finish_with_crc()
    }

    /// Loads a snapshot; every stored id must exist in `registry`.
    pub fn from_bytes(
        bytes: &[u8],
        registry: Arc<AnnouncementRegistry>,
    ) -> Result<Self, FingerprintError> {
        let mut r = Reader::open_checked(bytes, INDEX_MAGIC, INDEX_VERSION)?;
        let config = FingerprintConfig {
            neighborhood_frames: r.u8()?,
            neighborhood_bins: r.u8()?,
            threshold_sigmas: r.f64()?,
            max_peaks_per_second: r.u16()?,
            fan_out: r.u8()?,
            max_delta_frame: r.u8()?,
            max_delta_band: r.u16()?,
            min_votes: r.u32()?,
            offset_tolerance: r.u8()?,
            query_shifts: r.u8()?,
        };
        let mut index = FingerprintIndex::new(registry, config)?;
        let n_clips = r.u32()?;
        let mut previous: Option<String> = None;
        for _ in 0..n_clips {
            let id = r.str()?;
            if previous.as_ref().is_some_and(|p| *p >= id) {
                return Err(FingerprintError::Malformed(format!(
                    "clip {id:?} out of order or duplicated"
                )));
            }
            if !index.registry.contains(&id) {
                return Err(FingerprintError::UnknownAnnouncementId(id));
            }
            let n_frames = r.u32()?;
            let n = r.u32()? as usize;
            if n.saturating_mul(8) > r.remaining() {
                return Err(FingerprintError::Malformed(format!(
                    "clip {id:?}: landmark count {n} too large"
                )));
            }
            let mut landmarks = Vec::with_capacity(n);
            for _ in 0..n {
                landmarks.push((r.u32()?, r.u32()?));
            }
            previous = Some(id.clone());
            index.insert(id, n_frames, landmarks);
        }
        r.expect_end()?;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), FingerprintError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| FingerprintError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path, registry: Arc<AnnouncementRegistry>) -> Result<Self, FingerprintError> {
        let bytes = std::fs::read(path)
            .map_err(|e| FingerprintError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, registry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn hash_roundtrip(a in 0u16..512, t in 0u16..512, d in any::<u8>(), r in 0u8..64) {
            let h = FingerprintHash::pack(a, t, d, r).unwrap();
            prop_assert_eq!(
                (h.anchor_band(), h.target_band(), h.delta_frame(), h.reserved()),
                (a, t, d, r)
            );
        }
    }

    #[test]
    fn pack_rejects_wide_fields() {
        assert!(FingerprintHash::pack(512, 0, 0, 0).is_none());
        assert!(FingerprintHash::pack(0, 512, 0, 0).is_none());
        assert!(FingerprintHash::pack(0, 0, 0, 64).is_none());
        assert_eq!(FingerprintHash::pack(1, 0, 0, 0).unwrap().0, 1 << 23);
    }

    #[test]
    fn silence_has_no_peaks() {
        let ex = LandmarkExtractor::new(FingerprintConfig::default()).unwrap();
        let silent = AudioBuffer::new(vec![0.0; 16000], 8000).unwrap();
        assert!(ex.extract_peaks(&silent).unwrap().is_empty());
        let short = AudioBuffer::new(vec![0.0; 7999], 8000).unwrap();
        assert!(matches!(
            ex.extract_peaks(&short),
            Err(FingerprintError::TooShort { samples: 7999, required: 8000 })
        ));
    }

    #[test]
    fn landmarks_respect_target_zone() {
        let ex = LandmarkExtractor::new(FingerprintConfig::default()).unwrap();
        let p = |frame, band| Peak {
            frame,
            band,
            strength: 0.0,
        };
        let peaks = vec![p(0, 100), p(0, 120), p(1, 140), p(5, 131), p(64, 100), p(70, 100)];
        let lms = ex.landmarks(&peaks);
        for l in &lms {
            assert!(l.target_frame > l.anchor_frame);
            assert!(l.delta_frame() <= 63);
            assert!((l.target_band as i32 - l.anchor_band as i32).abs() <= 31);
        }
        let from_first: Vec<_> = lms.iter().filter(|l| l.anchor_band == 100 && l.anchor_frame == 0).collect();
        // (0,120) is simultaneous, (1,140) too far in band, (64,100) too late
        assert_eq!(from_first.len(), 1);
        assert_eq!((from_first[0].target_frame, from_first[0].target_band), (5, 131));
    }
}
