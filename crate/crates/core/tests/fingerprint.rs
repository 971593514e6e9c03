use std::sync::Arc;

use emt_core::fingerprint::{
    FingerprintConfig, FingerprintError, FingerprintHash, FingerprintIndex, LandmarkExtractor,
};
use emt_core::synth::{self, announcement_library};
use emt_core::{AnnouncementRegistry, AudioBuffer};
use rand::Rng;

fn library(n: usize) -> (Arc<AnnouncementRegistry>, Vec<(String, AudioBuffer)>) {
    let (reg, clips) = announcement_library(n, 5.0, 42);
    (Arc::new(reg), clips)
}

fn indexed(n: usize) -> (FingerprintIndex, Vec<(String, AudioBuffer)>) {
    let (reg, clips) = library(n);
    let mut idx = FingerprintIndex::with_defaults(reg);
    for (id, clip) in &clips {
        idx.add(id, clip).unwrap();
    }
    (idx, clips)
}

#[test]
fn pure_tone_peaks_sit_in_its_bin() {
    let ex = LandmarkExtractor::new(FingerprintConfig::default()).unwrap();
    let mut rng = synth::rng_for(3);
    let tone = synth::sine(1000.0, 0.5, 16000);
    let noise = synth::white_noise(&mut rng, 16000, 1e-4);
    let x: Vec<f32> = tone.iter().zip(&noise).map(|(a, b)| a + b).collect();
    let peaks = ex.extract_peaks(&AudioBuffer::new(x, 8000).unwrap()).unwrap();
    assert!(!peaks.is_empty());
    // 1 kHz at 8 kHz with a 1024-point transform lands on bin 128
    assert!(peaks.iter().all(|p| p.band == 128), "{peaks:?}");
}

#[test]
fn peak_density_is_capped_per_second() {
    let ex = LandmarkExtractor::new(FingerprintConfig::default()).unwrap();
    for class in emt_core::ClassLabel::ALL {
        let x = synth::generate(class, &mut synth::rng_for(9), 40000);
        let peaks = ex.extract_peaks(&AudioBuffer::new(x, 8000).unwrap()).unwrap();
        let last = peaks.iter().map(|p| p.frame).max().unwrap_or(0);
        for block in 0..=last / 32 {
            let n = peaks.iter().filter(|p| p.frame / 32 == block).count();
            assert!(n <= 30, "{class:?} block {block}: {n}");
        }
        for l in ex.landmarks(&peaks) {
            assert!((1..=63).contains(&l.delta_frame()));
            assert!((l.target_band as i32 - l.anchor_band as i32).abs() <= 31);
        }
    }
}

#[test]
fn hash_layout() {
    let h = FingerprintHash::pack(511, 3, 63, 0).unwrap();
    assert_eq!(h.0, (511 << 23) | (3 << 14) | (63 << 6));
    assert_eq!((h.anchor_band(), h.target_band(), h.delta_frame()), (511, 3, 63));
    assert!(FingerprintHash::pack(512, 0, 1, 0).is_none());
}

#[test]
fn too_short_and_bad_rate_are_rejected() {
    let (idx, _) = indexed(2);
    assert!(matches!(
        idx.query(&AudioBuffer::new(vec![0.0; 4000], 8000).unwrap()),
        Err(FingerprintError::TooShort { .. })
    ));
    assert!(idx.query(&AudioBuffer::new(vec![0.0; 16000], 16000).unwrap()).is_err());
}

#[test]
fn add_is_idempotent_and_checks_registry() {
    let (mut idx, clips) = indexed(3);
    let before = idx.hash_count();
    idx.add(&clips[1].0, &clips[1].1).unwrap();
    assert_eq!(idx.hash_count(), before);
    assert_eq!(idx.len(), 3);
    assert!(matches!(
        idx.add("nobody", &clips[0].1),
        Err(FingerprintError::UnknownAnnouncementId(_))
    ));
}

#[test]
fn every_clip_retrieves_itself_and_its_excerpts() {
    let (idx, clips) = indexed(20);
    let mut rng = synth::rng_for(5);
    for (id, clip) in &clips {
        let r = idx.query(clip).unwrap();
        assert!(r.matched, "{id}: {r:?}");
        assert_eq!(r.announcement_id.as_deref(), Some(id.as_str()));
        assert_eq!(r.offset_frames, 0);
        assert_eq!(r.sip_code.as_ref(), idx.registry().lookup(id));

        let start = rng.gen_range(0..=clip.len() - 16000);
        let r = idx.query(&clip.slice(start, start + 16000)).unwrap();
        assert!(r.matched && r.announcement_id.as_deref() == Some(id.as_str()), "{id}: {r:?}");
        let expected = start as f64 / 250.0;
        assert!((r.offset_frames as f64 - expected).abs() <= 2.0, "{} vs {expected}", r.offset_frames);
    }
}

#[test]
fn excerpt_at_one_second_reports_offset() {
    let (idx, clips) = indexed(5);
    let r = idx.query(&clips[2].1.slice(8000, 32000)).unwrap();
    assert!(r.matched);
    assert!((r.offset_frames - 32).abs() <= 2, "{r:?}");
    assert!((r.offset_seconds - 1.0).abs() <= 2.0 / 32.0);
}

#[test]
fn noise_and_unindexed_audio_do_not_match() {
    let (idx, _) = indexed(20);
    for i in 0..20 {
        let noise = synth::white_noise(&mut synth::rng_for(500 + i), 32000, 0.1);
        let r = idx.query(&AudioBuffer::new(noise, 8000).unwrap()).unwrap();
        assert!(!r.matched, "{r:?}");
    }
    let stranger = synth::announcement_clip(987_654, 4.0);
    assert!(!idx.query(&stranger).unwrap().matched);
}

#[test]
fn insertion_order_does_not_matter() {
    let (reg, clips) = library(8);
    let mut a = FingerprintIndex::with_defaults(reg.clone());
    let mut b = FingerprintIndex::with_defaults(reg);
    for (id, clip) in &clips {
        a.add(id, clip).unwrap();
    }
    for (id, clip) in clips.iter().rev() {
        b.add(id, clip).unwrap();
    }
    assert_eq!(a.to_bytes(), b.to_bytes());
    let q = clips[4].1.slice(4000, 28000);
    assert_eq!(a.query(&q).unwrap(), b.query(&q).unwrap());
}

#[test]
fn snapshot_round_trip_and_corruption() {
    let (idx, clips) = indexed(6);
    let bytes = idx.to_bytes();
    let back = FingerprintIndex::from_bytes(&bytes, idx.registry().clone()).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.hash_count(), idx.hash_count());
    let q = clips[0].1.slice(0, 24000);
    assert_eq!(back.query(&q).unwrap(), idx.query(&q).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.emfp");
    idx.save(&path).unwrap();
    let loaded = FingerprintIndex::load(&path, idx.registry().clone()).unwrap();
    assert_eq!(loaded.to_bytes(), bytes);

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(
        FingerprintIndex::from_bytes(&flipped, idx.registry().clone()),
        Err(FingerprintError::ChecksumFailure)
    ));
    let mut bumped = bytes.clone();
    bumped[4] += 1;
    assert!(matches!(
        FingerprintIndex::from_bytes(&bumped, idx.registry().clone()),
        Err(FingerprintError::VersionMismatch { found: 2, expected: 1 })
    ));
    assert!(FingerprintIndex::from_bytes(&bytes[..8], idx.registry().clone()).is_err());

    // the snapshot must agree with the registry it is loaded against
    let (other, _) = announcement_library(2, 1.0, 1);
    assert!(matches!(
        FingerprintIndex::from_bytes(&bytes, Arc::new(other)),
        Err(FingerprintError::UnknownAnnouncementId(_)) | Err(FingerprintError::Malformed(_))
    ));
}

#[test]
fn invalid_configs_are_refused() {
    let (reg, _) = library(1);
    for cfg in [
        FingerprintConfig { max_delta_frame: 0, ..FingerprintConfig::default() },
        FingerprintConfig { fan_out: 0, ..FingerprintConfig::default() },
        FingerprintConfig { query_shifts: 0, ..FingerprintConfig::default() },
        FingerprintConfig { threshold_sigmas: f64::NAN, ..FingerprintConfig::default() },
    ] {
        assert!(matches!(
            FingerprintIndex::new(reg.clone(), cfg),
            Err(FingerprintError::InvalidConfig(_))
        ));
    }
}
