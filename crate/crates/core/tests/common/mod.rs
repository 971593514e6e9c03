#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use emt_core::distill::Dataset;
use emt_core::fingerprint::FingerprintIndex;
use emt_core::gbdt::{train, GbtParams};
use emt_core::synth;
use emt_core::triage::CallEarlyMedia;
use emt_core::{AudioBuffer, ClassLabel, FeatureExtractor, FeatureMode, GbtModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Model trained straight on generated one-second clips of each class.
pub fn segment_model(per_class: usize, seed: u64) -> GbtModel {
    let fx = FeatureExtractor::default();
    let mut ds = Dataset::new(FeatureMode::Mfcc);
    let mut rng = synth::rng_for(seed);
    for i in 0..per_class * 4 {
        let class = ClassLabel::ALL[i % 4];
        let x = synth::generate(class, &mut rng, 8000);
        let m = fx.extract_samples(&x, FeatureMode::Mfcc).unwrap();
        ds.push(&m, class);
    }
    let params = GbtParams {
        n_iterations: 30,
        ..GbtParams::default()
    };
    train(&ds, &params).unwrap()
}

pub fn library_index(n: usize, seconds: f64, seed: u64) -> (Arc<FingerprintIndex>, Vec<(String, AudioBuffer)>) {
    let (reg, clips) = synth::announcement_library(n, seconds, seed);
    let mut idx = FingerprintIndex::with_defaults(Arc::new(reg));
    for (id, clip) in &clips {
        idx.add(id, clip).unwrap();
    }
    (Arc::new(idx), clips)
}

pub fn as_calls(calls: Vec<synth::SyntheticCall>) -> Vec<CallEarlyMedia> {
    calls
        .into_iter()
        .map(|c| CallEarlyMedia {
            call_id: c.call_id,
            audio: c.audio,
            arrival_time: 0.0,
        })
        .collect()
}

pub fn media(call_id: &str, audio: AudioBuffer) -> CallEarlyMedia {
    CallEarlyMedia {
        call_id: call_id.to_string(),
        audio,
        arrival_time: 0.0,
    }
}

/// Window weight written out directly from the raised-cosine definition.
pub fn oracle_weight(k: i64, half: i64) -> f64 {
    0.5 - 0.5 * (2.0 * PI * (half + k.abs()) as f64 / (2 * half) as f64).cos()
}

/// Per-class weighted counts summed over every offset in the window, one
/// class at a time. Out-of-range neighbors are skipped.
pub fn oracle_smooth(labels: &[ClassLabel], half: usize) -> Vec<ClassLabel> {
    let n = labels.len() as i64;
    let h = half as i64;
    (0..n)
        .map(|i| {
            let mut best = ClassLabel::ALL[0];
            let mut best_score = f64::NEG_INFINITY;
            for class in ClassLabel::ALL {
                let mut s = 0.0;
                for k in -h..=h {
                    let j = i + k;
                    if (0..n).contains(&j) && labels[j as usize] == class {
                        s += oracle_weight(k, h);
                    }
                }
                if s > best_score {
                    best_score = s;
                    best = class;
                }
            }
            best
        })
        .collect()
}

/// Labels built from runs with random lengths, so both long runs and short
/// flips show up.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<ClassLabel> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let class = ClassLabel::ALL[rng.gen_range(0..4)];
        let len = if rng.gen_bool(0.3) {
            rng.gen_range(1..20)
        } else {
            rng.gen_range(20..400)
        };
        out.extend(std::iter::repeat_n(class, len.min(n - out.len())));
    }
    out
}

