//! Teacher labels to training data.
//!
//! A teacher model emits one fine-grained class id per 10 ms frame. Those ids
//! are collapsed onto the four early-media classes, cleaned up with a
//! Hann-weighted majority vote over a ±150 frame neighborhood, and every
//! whole second that sits inside a run of one class becomes a labeled
//! training segment.

mod dataset;

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioBuffer, AudioError, SAMPLE_RATE, SEGMENT_LEN};
use crate::features::{FeatureExtractor, FeatureMatrix, FeatureMode};

pub use dataset::{
    build_dataset, read_label_file, stratified_split, BuildConfig, ClassCounts, ClassSeconds,
    Dataset, DatasetBuild, DatasetManifest, ManifestRecording, RecordingSummary, SplitSide,
    DATASET_MAGIC, DATASET_VERSION, MANIFEST_VERSION,
};

/// Teacher frames per second (10 ms frames).
pub const FRAMES_PER_SECOND: usize = 100;
/// Audio samples covered by one teacher frame at 8 kHz.
pub const SAMPLES_PER_FRAME: usize = SAMPLE_RATE as usize / FRAMES_PER_SECOND;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("teacher class {class_id} at frame {frame} has no entry in the aggregation map")]
    UnmappedTeacherClass { class_id: u32, frame: usize },
    #[error("offset {k} outside the smoothing window ±{half_width}")]
    OutOfWindow { k: i64, half_width: usize },
    #[error("smoothing window must be odd and at least 3, got {0}")]
    InvalidWindow(usize),
    #[error("recording {recording_id}: {labels} label frames cover less than {seconds} s of audio")]
    AlignmentError {
        recording_id: String,
        labels: usize,
        seconds: usize,
    },
    #[error("no audio for recording {recording_id} (looked for {path})")]
    MissingAudio { recording_id: String, path: String },
    #[error("aggregation map line {line}: {message}")]
    InvalidMap { line: usize, message: String },
    #[error("label file {path} line {line}: {message}")]
    InvalidLabelFile {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate recording id {0}")]
    DuplicateRecording(String),
    #[error("dataset file: {0}")]
    DatasetFormat(String),
    #[error("audio for {recording_id}: {source}")]
    Audio {
        recording_id: String,
        #[source]
        source: AudioError,
    },
    #[error("{0}")]
    Io(String),
}

/// The four aggregated early-media classes, with their persisted encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum ClassLabel {
    Announcement = 0,
    Ringback = 1,
    Music = 2,
    Silence = 3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [
        ClassLabel::Announcement,
        ClassLabel::Ringback,
        ClassLabel::Music,
        ClassLabel::Silence,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Announcement => "announcement",
            ClassLabel::Ringback => "ringback",
            ClassLabel::Music => "music",
            ClassLabel::Silence => "silence",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown class label {s:?}"))
    }
}

/// Per-frame teacher predictions for one recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherLabelSequence {
    pub recording_id: String,
    pub frame_labels: Vec<u32>,
}

/// Teacher class id → early-media class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassAggregationMap {
    entries: HashMap<u32, ClassLabel>,
}

impl ClassAggregationMap {
    pub fn new(entries: impl IntoIterator<Item = (u32, ClassLabel)>) -> Self {
        ClassAggregationMap {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn get(&self, teacher_id: u32) -> Option<ClassLabel> {
        self.entries.get(&teacher_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `teacher_class_id,class_label_name` CSV with a header row.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, DistillError> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut entries = HashMap::new();
        for (i, record) in csv.records().enumerate() {
            let line = i + 2;
            let bad = |message: String| DistillError::InvalidMap { line, message };
            let record = record.map_err(|e| bad(e.to_string()))?;
            if record.len() != 2 {
                return Err(bad(format!("expected 2 fields, got {}", record.len())));
            }
            let id: u32 = record[0]
                .parse()
                .map_err(|_| bad(format!("teacher id {:?} is not an integer", &record[0])))?;
            let label: ClassLabel = record[1].parse().map_err(bad)?;
            if entries.insert(id, label).is_some() {
                return Err(bad(format!("teacher id {id} listed twice")));
            }
        }
        Ok(ClassAggregationMap { entries })
    }

    pub fn load(path: &Path) -> Result<Self, DistillError> {
        let file = std::fs::File::open(path)
            .map_err(|e| DistillError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(file)
    }

    pub fn to_csv_string(&self) -> String {
        let mut ids: Vec<_> = self.entries.iter().collect();
        ids.sort();
        let mut out = String::from("teacher_class_id,class_label_name\n");
        for (id, label) in ids {
            out.push_str(&format!("{id},{label}\n"));
        }
        out
    }
}

pub fn aggregate_labels(
    seq: &TeacherLabelSequence,
    map: &ClassAggregationMap,
) -> Result<Vec<ClassLabel>, DistillError> {
    seq.frame_labels
        .iter()
        .enumerate()
        .map(|(frame, &class_id)| {
            map.get(class_id)
                .ok_or(DistillError::UnmappedTeacherClass { class_id, frame })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub window_size: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig { window_size: 301 }
    }
}

impl SmoothingConfig {
    pub fn new(window_size: usize) -> Result<Self, DistillError> {
        if window_size < 3 || window_size.is_multiple_of(2) {
            return Err(DistillError::InvalidWindow(window_size));
        }
        Ok(SmoothingConfig { window_size })
    }

    pub fn half_width(&self) -> usize {
        self.window_size / 2
    }
}

/// Weight of the neighbor at offset `k` in a Hann window of half-width `half_width`:
/// `0.5 - 0.5·cos(2π(K + k) / 2K)`.
///
/// Evaluated at `|k|` so that `W_k` and `W_-k` are bit-identical.
pub fn hann_weight(k: i64, half_width: usize) -> Result<f64, DistillError> {
    let kk = half_width as i64;
    if half_width == 0 || k.abs() > kk {
        return Err(DistillError::OutOfWindow { k, half_width });
    }
    let phase = 2.0 * std::f64::consts::PI * (kk + k.abs()) as f64 / (2 * kk) as f64;
    Ok(0.5 - 0.5 * phase.cos())
}

/// Replaces every label with the class of largest Hann-weighted count in its
/// window.
///
/// All positions read the original labels. Neighbors past either end of the
/// sequence contribute nothing, and ties go to the lowest class id.
pub fn smooth_labels(labels: &[ClassLabel], cfg: &SmoothingConfig) -> Vec<ClassLabel> {
    let half = cfg.half_width();
    let weights: Vec<f64> = (-(half as i64)..=half as i64)
        .map(|k| hann_weight(k, half).expect("k within window"))
        .collect();
    let n = labels.len();
    (0..n)
        .map(|i| {
            let mut score = [0.0f64; ClassLabel::COUNT];
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n.saturating_sub(1));
            for (j, label) in labels[lo..=hi].iter().enumerate() {
                // weights index = k + half where k = (lo + j) - i
                score[label.index()] += weights[lo + j + half - i];
            }
            let mut best = 0;
            for c in 1..ClassLabel::COUNT {
                if score[c] > score[best] {
                    best = c;
                }
            }
            ClassLabel::ALL[best]
        })
        .collect()
}

/// Start frames (and labels) of every one-second segment tiled out of runs of
/// at least [`FRAMES_PER_SECOND`] identical labels.
pub fn segment_starts(labels: &[ClassLabel]) -> Vec<(usize, ClassLabel)> {
    let mut out = Vec::new();
    let mut run_start = 0;
    while run_start < labels.len() {
        let label = labels[run_start];
        let run_len = labels[run_start..]
            .iter()
            .take_while(|&&l| l == label)
            .count();
        for s in 0..run_len / FRAMES_PER_SECOND {
            out.push((run_start + s * FRAMES_PER_SECOND, label));
        }
        run_start += run_len;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub features: FeatureMatrix,
    pub label: ClassLabel,
    pub recording_id: String,
    pub start_frame: usize,
}

impl LabeledSegment {
    /// Audio sample range covered by the segment.
    pub fn sample_range(&self) -> std::ops::Range<usize> {
        let start = self.start_frame * SAMPLES_PER_FRAME;
        start..start + SEGMENT_LEN
    }
}

/// Cuts labeled one-second training segments out of a recording.
///
/// `labels` are smoothed 10 ms labels aligned with `audio`; frames beyond the
/// last whole second of audio are ignored.
pub fn extract_segments(
    recording_id: &str,
    labels: &[ClassLabel],
    audio: &AudioBuffer,
    extractor: &FeatureExtractor,
    mode: FeatureMode,
) -> Result<Vec<LabeledSegment>, DistillError> {
    audio.require_8k().map_err(|source| DistillError::Audio {
        recording_id: recording_id.to_string(),
        source,
    })?;
    let seconds = audio.whole_seconds();
    let usable = seconds * FRAMES_PER_SECOND;
    if labels.len() < usable {
        return Err(DistillError::AlignmentError {
            recording_id: recording_id.to_string(),
            labels: labels.len(),
            seconds,
        });
    }
    let samples = audio.samples();
    Ok(segment_starts(&labels[..usable])
        .into_iter()
        .map(|(start_frame, label)| {
            let start = start_frame * SAMPLES_PER_FRAME;
            let features = extractor
                .extract_samples(&samples[start..start + SEGMENT_LEN], mode)
                .expect("slice is exactly one second");
            LabeledSegment {
                features,
                label,
                recording_id: recording_id.to_string(),
                start_frame,
            }
        })
        .collect())
}
