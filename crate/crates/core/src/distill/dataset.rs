//! Dataset assembly, the recording-level train/test split, and the on-disk
//! dataset format.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! magic "EMDS" | version u16 | feature mode u8 | rows u16 (29) | cols u16 (24)
//! | record count u64 | records: label u8 + 696 × f32
//! ```

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    aggregate_labels, extract_segments, smooth_labels, ClassAggregationMap, ClassLabel,
    DistillError, LabeledSegment, SmoothingConfig, TeacherLabelSequence,
};
use crate::audio::load_audio_file;
use crate::container::{Reader, Writer};
use crate::features::{FeatureExtractor, FeatureMatrix, FeatureMode, N_FEATURES, N_FRAMES, N_MELS};

pub const DATASET_MAGIC: &[u8; 4] = b"EMDS";
pub const DATASET_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u32 = 1;

/// Flat row-major table of 696-feature rows with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    mode: FeatureMode,
    features: Vec<f32>,
    labels: Vec<ClassLabel>,
}

impl Dataset {
    pub fn new(mode: FeatureMode) -> Self {
        Dataset {
            mode,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Builds a dataset from raw rows; `features.len()` must be a multiple of 696.
    pub fn from_rows(
        mode: FeatureMode,
        features: Vec<f32>,
        labels: Vec<ClassLabel>,
    ) -> Result<Self, DistillError> {
        if features.len() != labels.len() * N_FEATURES {
            return Err(DistillError::DatasetFormat(format!(
                "{} feature values for {} labels",
                features.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            mode,
            features,
            labels,
        })
    }

    pub fn push(&mut self, features: &FeatureMatrix, label: ClassLabel) {
        assert_eq!(features.mode(), self.mode, "feature mode mismatch");
        self.features.extend_from_slice(features.as_flat());
        self.labels.push(label);
    }

    pub fn push_row(&mut self, row: &[f32], label: ClassLabel) {
        assert_eq!(row.len(), N_FEATURES);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * N_FEATURES..(i + 1) * N_FEATURES]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.features.chunks_exact(N_FEATURES)
    }

    pub fn label(&self, i: usize) -> ClassLabel {
        self.labels[i]
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(DATASET_MAGIC, DATASET_VERSION);
        w.u8(self.mode.as_u8());
        w.u16(N_FRAMES as u16);
        w.u16(N_MELS as u16);
        w.u64(self.len() as u64);
        for (row, label) in self.rows().zip(&self.labels) {
            w.u8(*label as u8);
            for &v in row {
                w.f32(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DistillError> {
        let bad = |m: String| DistillError::DatasetFormat(m);
        let mut r = Reader::new(bytes);
        let e = |e: crate::container::ContainerError| bad(e.to_string());
        if r.take(4).map_err(e)? != DATASET_MAGIC {
            return Err(bad("not a dataset file (bad magic)".into()));
        }
        let version = r.u16().map_err(e)?;
        if version != DATASET_VERSION {
            return Err(bad(format!(
                "unsupported dataset version {version} (expected {DATASET_VERSION})"
            )));
        }
        let mode = FeatureMode::from_u8(r.u8().map_err(e)?)
            .ok_or_else(|| bad("unknown feature mode".into()))?;
        let (rows, cols) = (r.u16().map_err(e)?, r.u16().map_err(e)?);
        if (rows as usize, cols as usize) != (N_FRAMES, N_MELS) {
            return Err(bad(format!("feature shape {rows}x{cols}, expected 29x24")));
        }
        let n = r.u64().map_err(e)? as usize;
        let record_len = 1 + 4 * N_FEATURES;
        if r.remaining() != n.saturating_mul(record_len) {
            return Err(bad(format!(
                "{} payload bytes for {n} records",
                r.remaining()
            )));
        }
        let mut features = Vec::with_capacity(n * N_FEATURES);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = r.u8().map_err(e)?;
            labels.push(
                ClassLabel::from_index(label as usize)
                    .ok_or_else(|| bad(format!("record {i}: label {label} out of range")))?,
            );
            for _ in 0..N_FEATURES {
                features.push(r.f32().map_err(e)?);
            }
        }
        Ok(Dataset {
            mode,
            features,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DistillError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| DistillError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DistillError> {
        let bytes = std::fs::read(path)
            .map_err(|e| DistillError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Train,
    Test,
}

/// Per-recording segment counts, the unit the split works on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordingSummary {
    pub recording_id: String,
    pub class_seconds: [usize; 4],
}

impl RecordingSummary {
    pub fn total(&self) -> usize {
        self.class_seconds.iter().sum()
    }

    /// Class with the most seconds; ties go to the lowest class id. `None`
    /// when the recording produced no segments.
    pub fn dominant(&self) -> Option<ClassLabel> {
        if self.total() == 0 {
            return None;
        }
        let mut best = 0;
        for c in 1..4 {
            if self.class_seconds[c] > self.class_seconds[best] {
                best = c;
            }
        }
        ClassLabel::from_index(best)
    }
}

/// Recording-level split stratified by each recording's dominant class.
///
/// Within a stratum the recordings are shuffled with a seeded RNG and moved
/// to the test side greedily whenever that brings the stratum's test seconds
/// closer to `test_fraction` of its total, so both the recording count and
/// the per-class second share land near the target. Returns one side per
/// input summary plus human-readable warnings for degenerate strata.
pub fn stratified_split(
    summaries: &[RecordingSummary],
    test_fraction: f64,
    seed: u64,
) -> (Vec<SplitSide>, Vec<String>) {
    let mut sides = vec![SplitSide::Train; summaries.len()];
    let mut warnings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in ClassLabel::ALL {
        let mut members: Vec<usize> = (0..summaries.len())
            .filter(|&i| summaries[i].dominant() == Some(class))
            .collect();
        if members.is_empty() {
            continue;
        }
        members.sort_by(|&a, &b| summaries[a].recording_id.cmp(&summaries[b].recording_id));
        members.shuffle(&mut rng);
        let total: usize = members.iter().map(|&i| summaries[i].total()).sum();
        let target = test_fraction * total as f64;
        let mut test_seconds = 0usize;
        let mut test_count = 0;
        for &i in &members {
            if test_count + 1 == members.len() {
                break;
            }
            let with = (test_seconds + summaries[i].total()) as f64;
            if (with - target).abs() < (test_seconds as f64 - target).abs() {
                sides[i] = SplitSide::Test;
                test_seconds += summaries[i].total();
                test_count += 1;
            }
        }
        if test_count == 0 {
            warnings.push(format!(
                "class {class}: {} recording(s), none assigned to the test split",
                members.len()
            ));
        }
    }
    for s in summaries.iter().filter(|s| s.dominant().is_none()) {
        warnings.push(format!("recording {} produced no segments", s.recording_id));
    }
    (sides, warnings)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub announcement: usize,
    pub ringback: usize,
    pub music: usize,
    pub silence: usize,
}

impl From<[usize; 4]> for ClassCounts {
    fn from(c: [usize; 4]) -> Self {
        ClassCounts {
            announcement: c[0],
            ringback: c[1],
            music: c[2],
            silence: c[3],
        }
    }
}

impl ClassCounts {
    pub fn as_array(&self) -> [usize; 4] {
        [self.announcement, self.ringback, self.music, self.silence]
    }

    pub fn total(&self) -> usize {
        self.as_array().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecording {
    pub recording_id: String,
    pub split: Option<SplitSide>,
    pub dominant_class: Option<ClassLabel>,
    pub class_seconds: ClassCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSeconds {
    pub total: ClassCounts,
    pub train: ClassCounts,
    pub test: ClassCounts,
}

/// JSON sidecar describing a built dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub feature_mode: FeatureMode,
    pub feature_layout: String,
    pub seed: u64,
    pub test_fraction: f64,
    pub smoothing_window: usize,
    pub class_seconds: ClassSeconds,
    pub recordings: Vec<ManifestRecording>,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn from_split(
        summaries: &[RecordingSummary],
        sides: &[SplitSide],
        cfg: &BuildConfig,
        warnings: Vec<String>,
    ) -> Self {
        let mut total = [0; 4];
        let mut train = [0; 4];
        let mut test = [0; 4];
        let mut recordings = Vec::with_capacity(summaries.len());
        for (s, &side) in summaries.iter().zip(sides) {
            let dominant = s.dominant();
            for c in 0..4 {
                total[c] += s.class_seconds[c];
                match side {
                    SplitSide::Train => train[c] += s.class_seconds[c],
                    SplitSide::Test => test[c] += s.class_seconds[c],
                }
            }
            recordings.push(ManifestRecording {
                recording_id: s.recording_id.clone(),
                split: dominant.map(|_| side),
                dominant_class: dominant,
                class_seconds: s.class_seconds.into(),
            });
        }
        recordings.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            feature_mode: cfg.mode,
            feature_layout: "time-major 29x24 (index = frame * 24 + band)".into(),
            seed: cfg.seed,
            test_fraction: cfg.test_fraction,
            smoothing_window: cfg.smoothing.window_size,
            class_seconds: ClassSeconds {
                total: total.into(),
                train: train.into(),
                test: test.into(),
            },
            recordings,
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildConfig {
    pub smoothing: SmoothingConfig,
    pub mode: FeatureMode,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            smoothing: SmoothingConfig::default(),
            mode: FeatureMode::MelPower,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBuild {
    pub train: Dataset,
    pub test: Dataset,
    pub manifest: DatasetManifest,
}

impl DatasetBuild {
    /// Writes `train.emds`, `test.emds` and `manifest.json` into `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<Vec<PathBuf>, DistillError> {
        let io = |p: &Path, e: std::io::Error| DistillError::Io(format!("{}: {e}", p.display()));
        std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
        let train = out_dir.join("train.emds");
        let test = out_dir.join("test.emds");
        let manifest = out_dir.join("manifest.json");
        self.train.save(&train)?;
        self.test.save(&test)?;
        std::fs::write(&manifest, self.manifest.to_json()).map_err(|e| io(&manifest, e))?;
        Ok(vec![train, test, manifest])
    }
}

/// Reads a JSON Lines teacher label file. Blank lines are skipped.
pub fn read_label_file(path: &Path) -> Result<Vec<TeacherLabelSequence>, DistillError> {
    let file =
        std::fs::File::open(path).map_err(|e| DistillError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DistillError::Io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: TeacherLabelSequence =
            serde_json::from_str(&line).map_err(|e| DistillError::InvalidLabelFile {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(seq);
    }
    Ok(out)
}

fn audio_path(audio_dir: &Path, recording_id: &str) -> PathBuf {
    audio_dir.join(format!("{recording_id}.wav"))
}

fn process_recording(
    seq: &TeacherLabelSequence,
    audio_dir: &Path,
    map: &ClassAggregationMap,
    cfg: &BuildConfig,
    extractor: &FeatureExtractor,
) -> Result<Vec<LabeledSegment>, DistillError> {
    let labels = aggregate_labels(seq, map)?;
    let smoothed = smooth_labels(&labels, &cfg.smoothing);
    let audio = load_audio_file(&audio_path(audio_dir, &seq.recording_id), false).map_err(
        |source| DistillError::Audio {
            recording_id: seq.recording_id.clone(),
            source,
        },
    )?;
    extract_segments(&seq.recording_id, &smoothed, &audio, extractor, cfg.mode)
}

/// Aggregates, smooths and segments every recording, then splits train/test.
///
/// Each label record `recording_id` is paired with `<audio_dir>/<recording_id>.wav`.
/// Recordings are processed in parallel but results are ordered by
/// recording id, so the output only depends on the inputs and the seed.
pub fn build_dataset(
    label_files: &[PathBuf],
    audio_dir: &Path,
    map: &ClassAggregationMap,
    cfg: &BuildConfig,
    extractor: &FeatureExtractor,
) -> Result<DatasetBuild, DistillError> {
    let mut sequences = Vec::new();
    for path in label_files {
        sequences.extend(read_label_file(path)?);
    }
    sequences.sort_by(|a, b| a.recording_id.cmp(&b.recording_id));
    let mut seen = HashSet::new();
    for seq in &sequences {
        if !seen.insert(seq.recording_id.as_str()) {
            return Err(DistillError::DuplicateRecording(seq.recording_id.clone()));
        }
        let path = audio_path(audio_dir, &seq.recording_id);
        if !path.is_file() {
            return Err(DistillError::MissingAudio {
                recording_id: seq.recording_id.clone(),
                path: path.display().to_string(),
            });
        }
    }

    let per_recording: Vec<Result<Vec<LabeledSegment>, DistillError>> = sequences
        .par_iter()
        .map(|seq| process_recording(seq, audio_dir, map, cfg, extractor))
        .collect();
    let mut segments = Vec::with_capacity(per_recording.len());
    for r in per_recording {
        segments.push(r?);
    }

    let summaries: Vec<RecordingSummary> = sequences
        .iter()
        .zip(&segments)
        .map(|(seq, segs)| {
            let mut class_seconds = [0; 4];
            for s in segs {
                class_seconds[s.label.index()] += 1;
            }
            RecordingSummary {
                recording_id: seq.recording_id.clone(),
                class_seconds,
            }
        })
        .collect();
    let (sides, warnings) = stratified_split(&summaries, cfg.test_fraction, cfg.seed);
    for w in &warnings {
        log::warn!("{w}");
    }

    let mut train = Dataset::new(cfg.mode);
    let mut test = Dataset::new(cfg.mode);
    for (segs, side) in segments.iter().zip(&sides) {
        let target = match side {
            SplitSide::Train => &mut train,
            SplitSide::Test => &mut test,
        };
        for s in segs {
            target.push(&s.features, s.label);
        }
    }
    let manifest = DatasetManifest::from_split(&summaries, &sides, cfg, warnings);
    Ok(DatasetBuild {
        train,
        test,
        manifest,
    })
}
