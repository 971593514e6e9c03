//! Per-call triage: classify every second, fingerprint only announcement
//! calls, and account for the time each stage takes.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_audio_file, segment_seconds, AudioBuffer, SAMPLE_RATE};
use crate::distill::ClassLabel;
use crate::features::FeatureExtractor;
use crate::fingerprint::FingerprintIndex;
use crate::gbdt::GbtModel;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TriageError {
    #[error("parallelism must be at least 1")]
    InvalidParallelism,
    #[error("announcement fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("stage costs must be positive and finite (classify {classify_ms}, fingerprint {fingerprint_ms})")]
    InvalidCost { classify_ms: f64, fingerprint_ms: f64 },
    #[error("{0}")]
    Io(String),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallEarlyMedia {
    pub call_id: String,
    pub audio: AudioBuffer,
    /// Seconds since the start of the run.
    pub arrival_time: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum TriageDecision {
    SipMapped {
        call_id: String,
        sip_code: u16,
        announcement_id: String,
    },
    AnnouncementUnknown {
        call_id: String,
    },
    NoAnnouncement {
        call_id: String,
        dominant_class: ClassLabel,
    },
    Skipped {
        call_id: String,
        reason: String,
    },
}

impl TriageDecision {
    pub fn call_id(&self) -> &str {
        match self {
            TriageDecision::SipMapped { call_id, .. }
            | TriageDecision::AnnouncementUnknown { call_id }
            | TriageDecision::NoAnnouncement { call_id, .. }
            | TriageDecision::Skipped { call_id, .. } => call_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallClassification {
    pub seconds: Vec<ClassLabel>,
    pub dominant: ClassLabel,
}

/// Majority class; a tie involving Announcement goes to Announcement, other
/// ties to the lowest class id.
pub fn dominant_class(labels: &[ClassLabel]) -> Option<ClassLabel> {
    if labels.is_empty() {
        return None;
    }
    let mut counts = [0usize; 4];
    for l in labels {
        counts[l.index()] += 1;
    }
    let max = *counts.iter().max().expect("four classes");
    // Announcement has the lowest id, so the first class at the max count
    // covers both tie rules.
    ClassLabel::ALL.into_iter().find(|c| counts[c.index()] == max)
}

/// Fixed log-spaced timing histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHistogram {
    pub stage: String,
    /// Upper edge of each bucket in ms; the last bucket is unbounded.
    pub bucket_upper_ms: Vec<f64>,
    pub counts: Vec<u64>,
    pub count: u64,
    pub total_ms: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl StageHistogram {
    pub fn from_samples(stage: &str, samples_ms: &[f64]) -> Self {
        let bucket_upper_ms: Vec<f64> = (0..16).map(|i| 0.01 * 2f64.powi(i)).chain([f64::INFINITY]).collect();
        let mut counts = vec![0u64; bucket_upper_ms.len()];
        for &s in samples_ms {
            let b = bucket_upper_ms.partition_point(|&u| u < s);
            let last = counts.len() - 1;
            counts[b.min(last)] += 1;
        }
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| -> f64 {
            if sorted.is_empty() {
                0.0
            } else {
                sorted[((sorted.len() - 1) as f64 * p).round() as usize]
            }
        };
        let total: f64 = samples_ms.iter().fold(0.0, |a, b| a + b);
        StageHistogram {
            stage: stage.to_string(),
            bucket_upper_ms: bucket_upper_ms
                .into_iter()
                .map(|u| if u.is_finite() { u } else { f64::MAX })
                .collect(),
            counts,
            count: samples_ms.len() as u64,
            total_ms: total,
            mean_ms: if samples_ms.is_empty() {
                0.0
            } else {
                total / samples_ms.len() as f64
            },
            p50_ms: q(0.5),
            p95_ms: q(0.95),
            max_ms: sorted.last().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub version: u32,
    pub n_calls: usize,
    pub n_segments: usize,
    pub n_skipped: usize,
    /// Share of calls whose dominant class is Announcement.
    pub announcement_fraction: f64,
    pub fingerprint_queries: u64,
    pub avg_ms_classify: f64,
    pub avg_ms_fingerprint: f64,
    /// Classification plus gated fingerprinting, per call.
    pub avg_ms_triaged: f64,
    /// Fingerprinting every call, per call; absent when the baseline pass was off.
    pub avg_ms_always_fingerprint: Option<f64>,
    pub speedup_factor: Option<f64>,
    pub histograms: Vec<StageHistogram>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub parallelism: usize,
    /// Also fingerprint every call to measure the always-fingerprint cost.
    pub baseline: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            parallelism: 1,
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct CallTiming {
    classify_ms: f64,
    fingerprint_ms: Option<f64>,
    segments: usize,
    announcement: bool,
    skipped: bool,
}

/// Immutable model and index shared by every call; only the stage counters
/// are written during a run.
pub struct TriageEngine {
    model: Arc<GbtModel>,
    index: Arc<FingerprintIndex>,
    extractor: FeatureExtractor,
    classified_calls: AtomicU64,
    fingerprint_queries: AtomicU64,
    baseline_queries: AtomicU64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl TriageEngine {
    pub fn new(model: Arc<GbtModel>, index: Arc<FingerprintIndex>) -> Self {
        TriageEngine {
            model,
            index,
            extractor: FeatureExtractor::default(),
            classified_calls: AtomicU64::new(0),
            fingerprint_queries: AtomicU64::new(0),
            baseline_queries: AtomicU64::new(0),
        }
    }

    pub fn model(&self) -> &GbtModel {
        &self.model
    }

    pub fn index(&self) -> &FingerprintIndex {
        &self.index
    }

    /// Gated fingerprint queries issued so far (baseline queries excluded).
    pub fn fingerprint_queries(&self) -> u64 {
        self.fingerprint_queries.load(Ordering::Relaxed)
    }

    pub fn baseline_queries(&self) -> u64 {
        self.baseline_queries.load(Ordering::Relaxed)
    }

    pub fn classified_calls(&self) -> u64 {
        self.classified_calls.load(Ordering::Relaxed)
    }

    /// Classifies each whole second. `Err` carries the skip reason.
    pub fn classify_call(&self, media: &CallEarlyMedia) -> Result<CallClassification, String> {
        if media.audio.sample_rate() != SAMPLE_RATE {
            return Err(format!("wrong_rate: {} Hz", media.audio.sample_rate()));
        }
        if media.audio.whole_seconds() == 0 {
            return Err("too_short".to_string());
        }
        let segments = segment_seconds(&media.audio, &media.call_id).map_err(|e| e.to_string())?;
        let mode = self.model.feature_mode();
        let mut seconds = Vec::with_capacity(segments.len());
        for seg in &segments {
            let features = self.extractor.extract(seg, mode);
            seconds.push(
                self.model
                    .predict_class(features.as_flat())
                    .map_err(|e| format!("prediction failed: {e}"))?,
            );
        }
        self.classified_calls.fetch_add(1, Ordering::Relaxed);
        let dominant = dominant_class(&seconds).expect("at least one second");
        Ok(CallClassification { seconds, dominant })
    }

    fn triage_timed(&self, media: &CallEarlyMedia) -> (TriageDecision, CallTiming) {
        let call_id = media.call_id.clone();
        let mut timing = CallTiming::default();
        let t = Instant::now();
        let classified = self.classify_call(media);
        timing.classify_ms = ms_since(t);
        let classification = match classified {
            Ok(c) => c,
            Err(reason) => {
                timing.skipped = true;
                return (TriageDecision::Skipped { call_id, reason }, timing);
            }
        };
        timing.segments = classification.seconds.len();
        if classification.dominant != ClassLabel::Announcement {
            return (
                TriageDecision::NoAnnouncement {
                    call_id,
                    dominant_class: classification.dominant,
                },
                timing,
            );
        }
        timing.announcement = true;
        self.fingerprint_queries.fetch_add(1, Ordering::Relaxed);
        let t = Instant::now();
        let result = self.index.query(&media.audio);
        timing.fingerprint_ms = Some(ms_since(t));
        let decision = match result {
            Ok(m) if m.matched => match (m.announcement_id, m.sip_code) {
                (Some(announcement_id), Some(code)) => TriageDecision::SipMapped {
                    call_id,
                    sip_code: code.code(),
                    announcement_id,
                },
                _ => TriageDecision::AnnouncementUnknown { call_id },
            },
            Ok(_) => TriageDecision::AnnouncementUnknown { call_id },
            Err(e) => TriageDecision::Skipped {
                call_id,
                reason: format!("fingerprint failed: {e}"),
            },
        };
        (decision, timing)
    }

    pub fn triage(&self, media: &CallEarlyMedia) -> TriageDecision {
        self.triage_timed(media).0
    }

    fn baseline_ms(&self, media: &CallEarlyMedia) -> f64 {
        self.baseline_queries.fetch_add(1, Ordering::Relaxed);
        let t = Instant::now();
        let _ = self.index.query(&media.audio);
        ms_since(t)
    }

    /// Triages `calls` on a pool of `parallelism` workers. Decisions come back
    /// sorted by call id whatever the parallelism.
    pub fn run_stream(
        &self,
        calls: &[CallEarlyMedia],
        options: RunOptions,
    ) -> Result<(Vec<TriageDecision>, CostReport), TriageError> {
        if options.parallelism == 0 {
            return Err(TriageError::InvalidParallelism);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallelism)
            .build()
            .map_err(|e| TriageError::Pool(e.to_string()))?;
        let mut results: Vec<(TriageDecision, CallTiming)> =
            pool.install(|| calls.par_iter().map(|c| self.triage_timed(c)).collect());
        let baseline: Option<Vec<f64>> = options
            .baseline
            .then(|| pool.install(|| calls.par_iter().map(|c| self.baseline_ms(c)).collect()));
        results.sort_by(|a, b| a.0.call_id().cmp(b.0.call_id()));

        let n = calls.len();
        let per_call = |total: f64| if n == 0 { 0.0 } else { total / n as f64 };
        let classify: Vec<f64> = results.iter().map(|r| r.1.classify_ms).collect();
        let fingerprint: Vec<f64> = results.iter().filter_map(|r| r.1.fingerprint_ms).collect();
        let n_ann = results.iter().filter(|r| r.1.announcement).count();
        let n_classified = results.iter().filter(|r| !r.1.skipped).count();
        let total_classify: f64 = classify.iter().sum();
        let total_fp: f64 = fingerprint.iter().sum();
        let avg_triaged = per_call(total_classify + total_fp);
        let avg_always = baseline.as_ref().map(|b| per_call(b.iter().sum()));
        let mut histograms = vec![
            StageHistogram::from_samples("classify", &classify),
            StageHistogram::from_samples("fingerprint", &fingerprint),
        ];
        if let Some(b) = &baseline {
            histograms.push(StageHistogram::from_samples("always_fingerprint", b));
        }
        let report = CostReport {
            version: REPORT_VERSION,
            n_calls: n,
            n_segments: results.iter().map(|r| r.1.segments).sum(),
            n_skipped: n - n_classified,
            announcement_fraction: if n_classified == 0 {
                0.0
            } else {
                n_ann as f64 / n_classified as f64
            },
            fingerprint_queries: fingerprint.len() as u64,
            avg_ms_classify: per_call(total_classify),
            avg_ms_fingerprint: per_call(total_fp),
            avg_ms_triaged: avg_triaged,
            avg_ms_always_fingerprint: avg_always,
            speedup_factor: avg_always.filter(|_| avg_triaged > 0.0).map(|a| a / avg_triaged),
            histograms,
        };
        Ok((results.into_iter().map(|r| r.0).collect(), report))
    }
}

/// Reads every `.wav` file in `dir` (sorted by name) as a call whose id is the
/// file stem. Files that fail to decode come back as `Skipped` decisions.
pub fn load_call_dir(dir: &Path) -> Result<(Vec<CallEarlyMedia>, Vec<TriageDecision>), TriageError> {
    let entries = std::fs::read_dir(dir).map_err(|e| TriageError::Io(format!("{}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| TriageError::Io(e.to_string()))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            paths.push(path);
        }
    }
    paths.sort();
    let mut calls = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        let call_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        match load_audio_file(&path, false) {
            Ok(audio) => calls.push(CallEarlyMedia {
                call_id,
                audio,
                arrival_time: 0.0,
            }),
            Err(e) => skipped.push(TriageDecision::Skipped {
                call_id,
                reason: format!("decode: {e}"),
            }),
        }
    }
    Ok((calls, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub classify_ms: f64,
    pub fingerprint_ms: f64,
    pub announcement_fraction: f64,
    pub triaged_ms: f64,
    pub baseline_ms: f64,
    pub speedup: f64,
}

/// Expected per-call cost with and without triage: triaged `C + p·F`,
/// baseline `F`.
pub fn bench_cost_model(
    classify_ms: f64,
    fingerprint_ms: f64,
    announcement_fraction: f64,
) -> Result<CostModel, TriageError> {
    if !(0.0..=1.0).contains(&announcement_fraction) {
        return Err(TriageError::InvalidFraction(announcement_fraction));
    }
    let ok = |v: f64| v.is_finite() && v > 0.0;
    if !ok(classify_ms) || !ok(fingerprint_ms) {
        return Err(TriageError::InvalidCost {
            classify_ms,
            fingerprint_ms,
        });
    }
    let triaged_ms = classify_ms + announcement_fraction * fingerprint_ms;
    Ok(CostModel {
        classify_ms,
        fingerprint_ms,
        announcement_fraction,
        triaged_ms,
        baseline_ms: fingerprint_ms,
        speedup: fingerprint_ms / triaged_ms,
    })
}
