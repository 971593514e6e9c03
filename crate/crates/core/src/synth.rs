//! Synthetic early-media audio, a schedule-driven stand-in teacher, and call
//! workloads for tests, benchmarks and the `synth` CLI command.
//!
//! Every generator is a pure function of its RNG state, so a seed fixes the
//! output bit for bit.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{encode_wav_pcm16, AudioBuffer, SAMPLE_RATE};
use crate::distill::{
    ClassAggregationMap, ClassLabel, DistillError, TeacherLabelSequence, FRAMES_PER_SECOND,
    SAMPLES_PER_FRAME,
};
use crate::sip::{AnnouncementRegistry, AnnouncementRegistryEntry, SipCode};

const FS: f64 = SAMPLE_RATE as f64;

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn seconds_to_samples(s: f64) -> usize {
    (s * FS).round() as usize
}

pub fn white_noise<R: Rng>(rng: &mut R, n: usize, rms: f64) -> Vec<f32> {
    // uniform on [-a, a] has rms a/sqrt(3)
    let a = rms * 3f64.sqrt();
    (0..n).map(|_| (rng.gen_range(-a..=a)) as f32).collect()
}

pub fn sine(freq: f64, amplitude: f64, n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (amplitude * (TAU * freq * i as f64 / FS).sin()) as f32)
        .collect()
}

pub fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Adds white noise so that signal power over noise power equals `snr_db`.
pub fn add_noise_at_snr<R: Rng>(signal: &[f32], snr_db: f64, rng: &mut R) -> Vec<f32> {
    let noise_rms = rms(signal) / 10f64.powf(snr_db / 20.0);
    let noise = white_noise(rng, signal.len(), noise_rms);
    signal
        .iter()
        .zip(noise)
        .map(|(&s, n)| (s + n).clamp(-1.0, 1.0))
        .collect()
}

fn scale_to_peak(x: &mut [f32], peak: f64) {
    let max = x.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
    if max > 0.0 {
        let g = (peak / max) as f32;
        for v in x.iter_mut() {
            *v *= g;
        }
    }
}

/// Continuous ringback tone in one of the common national variants.
pub fn ringback<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    let variants: [&[f64]; 3] = [&[440.0, 480.0], &[425.0], &[400.0, 450.0]];
    let freqs = variants[rng.gen_range(0..variants.len())];
    let amp = rng.gen_range(0.08..0.35) / freqs.len() as f64;
    let phases: Vec<f64> = freqs.iter().map(|_| rng.gen_range(0.0..TAU)).collect();
    let mut out: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / FS;
            freqs
                .iter()
                .zip(&phases)
                .map(|(f, p)| amp * (TAU * f * t + p).sin())
                .sum::<f64>() as f32
        })
        .collect();
    let noise = white_noise(rng, n, amp * 0.003);
    for (o, e) in out.iter_mut().zip(noise) {
        *o += e;
    }
    out
}

/// Comfort-noise level hiss, or digital zero.
pub fn silence<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    if rng.gen_bool(0.25) {
        return vec![0.0; n];
    }
    let level = 10f64.powf(rng.gen_range(-4.5..-3.0));
    white_noise(rng, n, level)
}

fn midi_hz(note: f64) -> f64 {
    440.0 * 2f64.powf((note - 69.0) / 12.0)
}

/// Polyphonic music: a chord progression with harmonic-rich voices, a melody
/// line and simple percussion.
pub fn music<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    let bpm = rng.gen_range(80.0..150.0);
    let beat = seconds_to_samples(60.0 / bpm);
    let root = rng.gen_range(48..60) as f64;
    let progression = [[0.0, 4.0, 7.0], [5.0, 9.0, 12.0], [7.0, 11.0, 14.0], [-3.0, 0.0, 4.0]];
    let scale = [0.0, 2.0, 4.0, 5.0, 7.0, 9.0, 11.0, 12.0];
    let harmonics = rng.gen_range(3..7);
    let brightness: f64 = rng.gen_range(0.4..0.8);
    let mut out = vec![0f64; n];

    let voice = |out: &mut [f64], start: usize, len: usize, freq: f64, amp: f64| {
        let end = (start + len).min(n);
        let attack = (0.01 * FS) as usize;
        for (k, o) in out[start..end].iter_mut().enumerate() {
            let t = k as f64 / FS;
            let env = if k < attack {
                k as f64 / attack as f64
            } else {
                (-((k - attack) as f64) / (0.6 * len as f64)).exp()
            };
            let mut s = 0.0;
            for h in 1..=harmonics {
                let fh = freq * h as f64;
                if fh >= FS / 2.0 - 200.0 {
                    break;
                }
                s += brightness.powi(h - 1) * (TAU * fh * t).sin();
            }
            *o += amp * env * s;
        }
    };

    let mut start = 0;
    let mut bar = 0;
    while start < n {
        let chord = progression[bar % progression.len()];
        let bar_len = 4 * beat;
        for &iv in &chord {
            voice(&mut out, start, bar_len, midi_hz(root + iv), 0.12);
        }
        for b in 0..4 {
            let s = start + b * beat;
            if s >= n {
                break;
            }
            let note = root + 12.0 + scale[rng.gen_range(0..scale.len())];
            voice(&mut out, s, beat, midi_hz(note), 0.18);
            // kick on every beat, hat on the off-beat
            let kick = (0.12 * FS) as usize;
            for k in 0..kick.min(n - s) {
                let t = k as f64 / FS;
                out[s + k] += 0.3 * (-t / 0.04).exp() * (TAU * (50.0 + 60.0 * (-t / 0.02).exp()) * t).sin();
            }
            let hs = s + beat / 2;
            let hat = (0.05 * FS) as usize;
            for k in 0..hat.min(n.saturating_sub(hs)) {
                out[hs + k] += 0.05 * (-(k as f64) / (0.01 * FS)).exp() * rng.gen_range(-1.0..1.0);
            }
        }
        start += bar_len;
        bar += 1;
    }
    let mut out: Vec<f32> = out.into_iter().map(|v| v as f32).collect();
    scale_to_peak(&mut out, rng.gen_range(0.3..0.8));
    out
}

struct Resonator {
    b1: f64,
    b2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new() -> Self {
        Resonator {
            b1: 0.0,
            b2: 0.0,
            gain: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tune(&mut self, freq: f64, bandwidth: f64) {
        let r = (-std::f64::consts::PI * bandwidth / FS).exp();
        self.b1 = 2.0 * r * (TAU * freq / FS).cos();
        self.b2 = -r * r;
        self.gain = 1.0 - r;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.b1 * self.y1 + self.b2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Formant frequencies of a few vowels.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];

/// Speech-like voice: glottal pulses through three formant resonators,
/// syllables with pitch contours, fricative onsets and word pauses.
pub fn speech_like<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    let f0_base = rng.gen_range(95.0..230.0);
    let mut out = vec![0f64; n];
    let mut formants = [Resonator::new(), Resonator::new(), Resonator::new()];
    let mut pos = 0;
    let mut phase = 0.0;
    let mut prev_hp = 0.0;
    while pos < n {
        // a word of 1-4 syllables, then a pause
        let syllables = rng.gen_range(1..=4);
        for _ in 0..syllables {
            let len = seconds_to_samples(rng.gen_range(0.12..0.30));
            let fric = if rng.gen_bool(0.35) {
                seconds_to_samples(rng.gen_range(0.03..0.08))
            } else {
                0
            };
            let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
            let scale = rng.gen_range(0.92..1.08);
            let f0_start = f0_base * rng.gen_range(0.85..1.2);
            let f0_end = f0_start * rng.gen_range(0.8..1.1);
            for k in 0..fric {
                if pos + k >= n {
                    break;
                }
                let w: f64 = rng.gen_range(-1.0..1.0);
                let hp = w - prev_hp;
                prev_hp = w;
                out[pos + k] += 0.08 * hp;
            }
            pos += fric;
            for (i, r) in formants.iter_mut().enumerate() {
                r.tune(vowel[i] * scale, 60.0 + 40.0 * i as f64);
            }
            for k in 0..len {
                if pos + k >= n {
                    break;
                }
                let x = k as f64 / len as f64;
                let f0 = f0_start + (f0_end - f0_start) * x;
                phase += f0 / FS;
                let pulse = if phase >= 1.0 {
                    phase -= 1.0;
                    1.0
                } else {
                    0.0
                };
                let src = pulse + 0.02 * rng.gen_range(-1.0..1.0);
                let env = (std::f64::consts::PI * x).sin().powf(0.6);
                let y: f64 = formants
                    .iter_mut()
                    .zip([1.0, 0.6, 0.3])
                    .map(|(r, g)| g * r.step(src))
                    .sum();
                out[pos + k] += env * y;
            }
            pos += len;
            pos += seconds_to_samples(rng.gen_range(0.01..0.05));
        }
        pos += seconds_to_samples(rng.gen_range(0.08..0.3));
    }
    let mut out: Vec<f32> = out.into_iter().map(|v| v as f32).collect();
    scale_to_peak(&mut out, rng.gen_range(0.3..0.8));
    let floor = white_noise(rng, n, 2e-4);
    for (o, e) in out.iter_mut().zip(floor) {
        *o += e;
    }
    out
}

pub fn generate<R: Rng>(class: ClassLabel, rng: &mut R, n: usize) -> Vec<f32> {
    match class {
        ClassLabel::Announcement => speech_like(rng, n),
        ClassLabel::Ringback => ringback(rng, n),
        ClassLabel::Music => music(rng, n),
        ClassLabel::Silence => silence(rng, n),
    }
}

/// An announcement recording fully determined by `seed`.
pub fn announcement_clip(seed: u64, seconds: f64) -> AudioBuffer {
    let mut rng = rng_for(seed ^ 0x616e_6e6f_756e_6365);
    AudioBuffer::clamped(speech_like(&mut rng, seconds_to_samples(seconds)), SAMPLE_RATE)
}

/// Fine-grained ids the synthetic teacher emits for each class.
pub const TEACHER_IDS: [(ClassLabel, &[u32]); 4] = [
    (ClassLabel::Announcement, &[0, 1, 2, 3]),
    (ClassLabel::Ringback, &[389, 390, 391]),
    (ClassLabel::Music, &[137, 138, 139, 140, 141]),
    (ClassLabel::Silence, &[500, 501]),
];

pub fn teacher_ids(class: ClassLabel) -> &'static [u32] {
    TEACHER_IDS[class.index()].1
}

/// Aggregation map matching the synthetic teacher's ids.
pub fn synthetic_aggregation_map() -> ClassAggregationMap {
    ClassAggregationMap::new(
        TEACHER_IDS
            .iter()
            .flat_map(|(c, ids)| ids.iter().map(move |&id| (id, *c))),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleBlock {
    pub class: ClassLabel,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecording {
    pub id: String,
    pub audio: AudioBuffer,
    pub schedule: Vec<ScheduleBlock>,
    pub teacher: TeacherLabelSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordingParams {
    pub min_seconds: u32,
    pub max_seconds: u32,
    pub min_block_seconds: f64,
    pub max_block_seconds: f64,
    /// Per-frame probability that the teacher starts a short wrong-class burst.
    pub glitch_rate: f64,
    pub max_glitch_frames: usize,
}

impl Default for RecordingParams {
    fn default() -> Self {
        RecordingParams {
            min_seconds: 20,
            max_seconds: 40,
            min_block_seconds: 3.0,
            max_block_seconds: 10.0,
            glitch_rate: 0.004,
            max_glitch_frames: 40,
        }
    }
}

/// Teacher labels read off the schedule, one fine-grained id per 10 ms frame,
/// with occasional short bursts of a wrong class.
fn teacher_labels<R: Rng>(
    rng: &mut R,
    schedule: &[ScheduleBlock],
    n_samples: usize,
    params: &RecordingParams,
) -> Vec<u32> {
    let n_frames = n_samples / SAMPLES_PER_FRAME;
    let mut labels = Vec::with_capacity(n_frames);
    let mut block = 0;
    let mut current_id = None;
    let mut glitch: Option<(u32, usize)> = None;
    for f in 0..n_frames {
        let center = f * SAMPLES_PER_FRAME + SAMPLES_PER_FRAME / 2;
        while block + 1 < schedule.len() && center >= schedule[block].end {
            block += 1;
            current_id = None;
        }
        let class = schedule[block].class;
        let ids = teacher_ids(class);
        let id = match current_id {
            Some(id) if !rng.gen_bool(0.01) => id,
            _ => ids[rng.gen_range(0..ids.len())],
        };
        current_id = Some(id);
        if glitch.is_none() && rng.gen_bool(params.glitch_rate) {
            let other = ClassLabel::ALL[(class.index() + rng.gen_range(1..4)) % 4];
            let ids = teacher_ids(other);
            glitch = Some((ids[rng.gen_range(0..ids.len())], rng.gen_range(3..=params.max_glitch_frames)));
        }
        match glitch.as_mut() {
            Some((gid, left)) => {
                labels.push(*gid);
                *left -= 1;
                if *left == 0 {
                    glitch = None;
                }
            }
            None => labels.push(id),
        }
    }
    labels
}

/// A recording of back-to-back class blocks and its synthetic teacher labels.
pub fn recording(id: &str, seed: u64, params: &RecordingParams) -> SyntheticRecording {
    let mut rng = rng_for(seed);
    let seconds = rng.gen_range(params.min_seconds..=params.max_seconds);
    let n = seconds as usize * SAMPLE_RATE as usize;
    let mut samples = Vec::with_capacity(n);
    let mut schedule = Vec::new();
    let mut last: Option<ClassLabel> = None;
    while samples.len() < n {
        let class = loop {
            let c = ClassLabel::ALL[rng.gen_range(0..4)];
            if Some(c) != last {
                break c;
            }
        };
        last = Some(class);
        let len = seconds_to_samples(rng.gen_range(params.min_block_seconds..params.max_block_seconds))
            .min(n - samples.len());
        let start = samples.len();
        samples.extend(generate(class, &mut rng, len));
        schedule.push(ScheduleBlock {
            class,
            start,
            end: start + len,
        });
    }
    let frame_labels = teacher_labels(&mut rng, &schedule, n, params);
    SyntheticRecording {
        id: id.to_string(),
        audio: AudioBuffer::clamped(samples, SAMPLE_RATE),
        schedule,
        teacher: TeacherLabelSequence {
            recording_id: id.to_string(),
            frame_labels,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPaths {
    pub audio_dir: PathBuf,
    pub labels: PathBuf,
    pub map: PathBuf,
}

/// Writes `n` recordings as `audio/<id>.wav`, their teacher labels as
/// `labels.jsonl` and the aggregation map as `map.csv` under `dir`.
pub fn write_corpus(
    dir: &Path,
    n: usize,
    seed: u64,
    params: &RecordingParams,
) -> Result<CorpusPaths, DistillError> {
    let io = |p: &Path, e: std::io::Error| DistillError::Io(format!("{}: {e}", p.display()));
    let audio_dir = dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| io(&audio_dir, e))?;
    let labels = dir.join("labels.jsonl");
    let mut out = std::fs::File::create(&labels).map_err(|e| io(&labels, e))?;
    let recordings: Vec<SyntheticRecording> = {
        use rayon::prelude::*;
        (0..n)
            .into_par_iter()
            .map(|i| recording(&format!("rec{i:04}"), seed.wrapping_add(i as u64 * 7919), params))
            .collect()
    };
    for rec in &recordings {
        let path = audio_dir.join(format!("{}.wav", rec.id));
        std::fs::write(&path, encode_wav_pcm16(&rec.audio)).map_err(|e| io(&path, e))?;
        let line = serde_json::to_string(&rec.teacher).expect("labels serialize");
        writeln!(out, "{line}").map_err(|e| io(&labels, e))?;
    }
    let map = dir.join("map.csv");
    std::fs::write(&map, synthetic_aggregation_map().to_csv_string()).map_err(|e| io(&map, e))?;
    Ok(CorpusPaths {
        audio_dir,
        labels,
        map,
    })
}

/// SIP codes handed out to synthetic announcements, in rotation.
const ANNOUNCEMENT_CODES: [(u16, &str); 8] = [
    (404, "number not in service"),
    (480, "subscriber temporarily unavailable"),
    (486, "subscriber busy"),
    (503, "network congestion"),
    (484, "incomplete number"),
    (410, "number changed"),
    (603, "call declined"),
    (488, "service not available in this area"),
];

/// Announcement library: registry entries plus audio for `n` announcements.
pub fn announcement_library(n: usize, seconds: f64, seed: u64) -> (AnnouncementRegistry, Vec<(String, AudioBuffer)>) {
    let mut entries = Vec::with_capacity(n);
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("ann{i:03}");
        let (code, text) = ANNOUNCEMENT_CODES[i % ANNOUNCEMENT_CODES.len()];
        entries.push(AnnouncementRegistryEntry {
            announcement_id: id.clone(),
            sip_code: SipCode::new(code, "").expect("valid code"),
            description: text.to_string(),
        });
        clips.push((id, announcement_clip(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), seconds)));
    }
    let registry = AnnouncementRegistry::from_entries(entries).expect("unique ids");
    (registry, clips)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCall {
    pub call_id: String,
    pub audio: AudioBuffer,
    /// Class the call's audio was generated from.
    pub truth: ClassLabel,
    /// Source clip for announcement calls cut from the library.
    pub announcement_id: Option<String>,
}

/// `n_calls` calls of `seconds` each; `round(n·announcement_fraction)` of them
/// are excerpts of library announcements, the rest ringback, music or silence.
pub fn call_workload(
    n_calls: usize,
    seconds: f64,
    announcement_fraction: f64,
    library: &[(String, AudioBuffer)],
    seed: u64,
) -> Vec<SyntheticCall> {
    let mut rng = rng_for(seed);
    let n_ann = if library.is_empty() {
        0
    } else {
        (n_calls as f64 * announcement_fraction.clamp(0.0, 1.0)).round() as usize
    };
    let mut kinds: Vec<bool> = (0..n_calls).map(|i| i < n_ann).collect();
    kinds.shuffle(&mut rng);
    let len = seconds_to_samples(seconds);
    let others = [ClassLabel::Ringback, ClassLabel::Music, ClassLabel::Silence];
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, is_ann)| {
            let call_id = format!("call{i:05}");
            let mut call_rng = rng_for(rng.gen());
            if is_ann {
                let (id, clip) = &library[call_rng.gen_range(0..library.len())];
                let start = call_rng.gen_range(0..=clip.len().saturating_sub(len));
                let end = (start + len).min(clip.len());
                SyntheticCall {
                    call_id,
                    audio: clip.slice(start, end),
                    truth: ClassLabel::Announcement,
                    announcement_id: Some(id.clone()),
                }
            } else {
                let class = others[call_rng.gen_range(0..others.len())];
                SyntheticCall {
                    call_id,
                    audio: AudioBuffer::clamped(generate(class, &mut call_rng, len), SAMPLE_RATE),
                    truth: class,
                    announcement_id: None,
                }
            }
        })
        .collect()
}

/// Frames of teacher labels per second, re-exported for callers sizing label runs.
pub const TEACHER_FRAMES_PER_SECOND: usize = FRAMES_PER_SECOND;
