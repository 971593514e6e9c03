//! Early-media triage.
//!
//! Classifies each second of pre-answer call audio into one of four classes
//! (announcement, ringback, music, silence) with a gradient-boosted tree
//! ensemble, and maps announcement audio to SIP response codes through a
//! landmark fingerprint index. The offline half of the crate turns per-frame
//! teacher labels into a training set and trains the ensemble.

pub mod audio;
pub mod distill;
pub mod features;
pub mod fingerprint;
pub mod gbdt;
pub mod sip;
pub mod synth;
pub mod triage;

mod container;

pub use audio::{AudioBuffer, SecondSegment, SAMPLE_RATE};
pub use distill::ClassLabel;
pub use features::{FeatureExtractor, FeatureMatrix, FeatureMode};
pub use fingerprint::{FingerprintIndex, MatchResult};
pub use gbdt::{GbtModel, GbtParams};
pub use sip::{AnnouncementRegistry, SipCode};
pub use triage::{CostReport, TriageDecision, TriageEngine};
