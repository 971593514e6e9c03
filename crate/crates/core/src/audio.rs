//! Telephony audio decoding, resampling and one-second segmentation.
//!
//! Everything downstream of this module runs on 8 kHz mono buffers with
//! samples normalized to [-1, 1].

use std::path::Path;

use thiserror::Error;

/// Canonical pipeline sample rate.
pub const SAMPLE_RATE: u32 = 8000;
/// Samples in one second at [`SAMPLE_RATE`].
pub const SEGMENT_LEN: usize = SAMPLE_RATE as usize;

const WAVE_FORMAT_PCM: u16 = 0x0001;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 0x0003;
const WAVE_FORMAT_MULAW: u16 = 0x0007;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error, PartialEq)]
pub enum AudioError {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt WAV container: {0}")]
    CorruptContainer(String),
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedRate(u32),
    #[error("expected {expected} Hz audio, got {found} Hz")]
    WrongRate { expected: u32, found: u32 },
    #[error("sample {index} is {value}, outside [-1, 1]")]
    SampleOutOfRange { index: usize, value: f32 },
    #[error("segment must hold exactly {SEGMENT_LEN} samples, got {0}")]
    BadSegmentLength(usize),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::UnsupportedRate(0));
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !(-1.0..=1.0).contains(*s))
        {
            return Err(AudioError::SampleOutOfRange { index, value });
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    /// Clamps into [-1, 1]; NaN becomes 0.
    pub fn clamped(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        let samples = samples
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) })
            .collect();
        AudioBuffer {
            samples,
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Number of whole seconds held by the buffer.
    pub fn whole_seconds(&self) -> usize {
        self.samples.len() / self.sample_rate as usize
    }

    pub fn slice(&self, start: usize, end: usize) -> AudioBuffer {
        AudioBuffer {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn require_8k(&self) -> Result<(), AudioError> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(AudioError::WrongRate {
                expected: SAMPLE_RATE,
                found: self.sample_rate,
            });
        }
        Ok(())
    }
}

/// Exactly one second of 8 kHz audio cut from a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondSegment {
    samples: Vec<f32>,
    pub source_id: String,
    pub index: usize,
}

impl SecondSegment {
    pub fn new(
        samples: Vec<f32>,
        source_id: impl Into<String>,
        index: usize,
    ) -> Result<Self, AudioError> {
        if samples.len() != SEGMENT_LEN {
            return Err(AudioError::BadSegmentLength(samples.len()));
        }
        Ok(SecondSegment {
            samples,
            source_id: source_id.into(),
            index,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }
}

/// G.711 µ-law expansion to a 14-bit-range linear value (as i16).
pub fn mulaw_expand(byte: u8) -> i16 {
    let u = !byte;
    let sign = u & 0x80;
    let exponent = (u >> 4) & 0x07;
    let mantissa = (u & 0x0F) as i16;
    let magnitude = (((mantissa << 3) + 0x84) << exponent) - 0x84;
    if sign != 0 {
        -magnitude
    } else {
        magnitude
    }
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk, AudioError> {
    if body.len() < 16 {
        return Err(AudioError::CorruptContainer("fmt chunk too short".into()));
    }
    let mut format = le_u16(body, 0);
    if format == WAVE_FORMAT_EXTENSIBLE {
        // cbSize(2) validBits(2) channelMask(4) then the subformat GUID whose
        // first two bytes carry the plain format tag.
        if body.len() < 26 {
            return Err(AudioError::CorruptContainer(
                "extensible fmt chunk too short".into(),
            ));
        }
        format = le_u16(body, 24);
    }
    Ok(FmtChunk {
        format,
        channels: le_u16(body, 2),
        sample_rate: le_u32(body, 4),
        bits_per_sample: le_u16(body, 14),
    })
}

/// Decodes a mono RIFF/WAVE file holding 16-bit PCM or 8-bit µ-law.
///
/// Samples are normalized by 1/32768. The sample rate is taken from the
/// header as-is; use [`resample_to_8k`] to bring it to the pipeline rate.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::CorruptContainer("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let start = pos + 8;
        let end = start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                AudioError::CorruptContainer(format!(
                    "chunk {:?} overruns file",
                    String::from_utf8_lossy(id)
                ))
            })?;
        match id {
            b"fmt " => fmt = Some(parse_fmt(&bytes[start..end])?),
            b"data" => data = Some(&bytes[start..end]),
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    let fmt = fmt.ok_or_else(|| AudioError::CorruptContainer("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::CorruptContainer("no data chunk".into()))?;

    if fmt.channels != 1 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{} channels (mono required)",
            fmt.channels
        )));
    }
    if fmt.sample_rate == 0 {
        return Err(AudioError::CorruptContainer("sample rate 0".into()));
    }
    let samples = match (fmt.format, fmt.bits_per_sample) {
        (WAVE_FORMAT_PCM, 16) => {
            if data.len() % 2 != 0 {
                return Err(AudioError::CorruptContainer("odd PCM16 data length".into()));
            }
            pcm16_to_f32(data)
        }
        (WAVE_FORMAT_MULAW, 8) => data
            .iter()
            .map(|&b| mulaw_expand(b) as f32 / 32768.0)
            .collect(),
        (WAVE_FORMAT_PCM, bits) => {
            return Err(AudioError::UnsupportedFormat(format!("{bits}-bit PCM")))
        }
        (WAVE_FORMAT_IEEE_FLOAT, _) => {
            return Err(AudioError::UnsupportedFormat("float PCM".into()))
        }
        (WAVE_FORMAT_MULAW, bits) => {
            return Err(AudioError::UnsupportedFormat(format!("{bits}-bit mu-law")))
        }
        (tag, _) => {
            return Err(AudioError::UnsupportedFormat(format!(
                "format tag 0x{tag:04x}"
            )))
        }
    };
    Ok(AudioBuffer {
        samples,
        sample_rate: fmt.sample_rate,
    })
}

fn pcm16_to_f32(data: &[u8]) -> Vec<f32> {
    data.chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect()
}

/// Headerless little-endian PCM16 at 8 kHz.
pub fn decode_raw_pcm8k(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    if !bytes.len().is_multiple_of(2) {
        return Err(AudioError::CorruptContainer("odd raw PCM16 length".into()));
    }
    Ok(AudioBuffer {
        samples: pcm16_to_f32(bytes),
        sample_rate: SAMPLE_RATE,
    })
}

fn to_i16(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes a mono 16-bit PCM WAV file.
pub fn encode_wav_pcm16(buffer: &AudioBuffer) -> Vec<u8> {
    let data_len = buffer.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buffer.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &buffer.samples {
        out.extend_from_slice(&to_i16(s).to_le_bytes());
    }
    out
}

/// Reads a WAV file (or raw PCM16LE@8k when `raw_pcm8k`) and brings it to 8 kHz.
pub fn load_audio_file(path: &Path, raw_pcm8k: bool) -> Result<AudioBuffer, AudioError> {
    let bytes =
        std::fs::read(path).map_err(|e| AudioError::Io(format!("{}: {e}", path.display())))?;
    let buffer = if raw_pcm8k {
        decode_raw_pcm8k(&bytes)?
    } else {
        decode_wav(&bytes)?
    };
    resample_to_8k(buffer)
}

/// Linear-interpolation resampler to 8 kHz.
///
/// Accepts 8, 16, 44.1 and 48 kHz input; 8 kHz input is returned untouched.
pub fn resample_to_8k(buffer: AudioBuffer) -> Result<AudioBuffer, AudioError> {
    let rate = buffer.sample_rate;
    match rate {
        SAMPLE_RATE => return Ok(buffer),
        16000 | 44100 | 48000 => {}
        other => return Err(AudioError::UnsupportedRate(other)),
    }
    let input = &buffer.samples;
    if input.is_empty() {
        return Ok(AudioBuffer {
            samples: Vec::new(),
            sample_rate: SAMPLE_RATE,
        });
    }
    let rate = rate as u64;
    let target = SAMPLE_RATE as u64;
    let out_len = ((input.len() as u64 - 1) * target / rate + 1) as usize;
    let samples = (0..out_len as u64)
        .map(|i| {
            // exact rational position i * rate / target in input samples
            let num = i * rate;
            let idx = (num / target) as usize;
            let frac = (num % target) as f32 / target as f32;
            let a = input[idx];
            match input.get(idx + 1) {
                Some(&b) if frac > 0.0 => a + frac * (b - a),
                _ => a,
            }
        })
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

/// Cuts an 8 kHz buffer into consecutive whole seconds; the tail is dropped.
pub fn segment_seconds(
    buffer: &AudioBuffer,
    source_id: &str,
) -> Result<Vec<SecondSegment>, AudioError> {
    buffer.require_8k()?;
    Ok(buffer
        .samples
        .chunks_exact(SEGMENT_LEN)
        .enumerate()
        .map(|(index, chunk)| SecondSegment {
            samples: chunk.to_vec(),
            source_id: source_id.to_string(),
            index,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wav_with_fmt(format: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data.len()) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        let block = channels * bits / 8;
        out.extend_from_slice(&(rate * block as u32).to_le_bytes());
        out.extend_from_slice(&block.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn pcm16_silence_decodes_to_zeros() {
        let wav = wav_with_fmt(1, 1, 8000, 16, &vec![0u8; 16000]);
        let buf = decode_wav(&wav).unwrap();
        assert_eq!(buf.sample_rate(), 8000);
        assert_eq!(buf.len(), 8000);
        assert!(buf.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_full_scale_normalization() {
        let data: Vec<u8> = [32767i16, -32768]
            .iter()
            .flat_map(|s| s.to_le_bytes())
            .collect();
        let buf = decode_wav(&wav_with_fmt(1, 1, 8000, 16, &data)).unwrap();
        assert_eq!(buf.samples()[0], 32767.0 / 32768.0);
        assert!((buf.samples()[0] - 0.99997).abs() < 1e-5);
        assert_eq!(buf.samples()[1], -1.0);
    }

    #[test]
    fn mulaw_reference_values() {
        // Reference points of the G.711 mu-law expansion table.
        assert_eq!(mulaw_expand(0xFF), 0);
        assert_eq!(mulaw_expand(0x7F), 0);
        assert_eq!(mulaw_expand(0x00), -32124);
        assert_eq!(mulaw_expand(0x80), 32124);
        assert_eq!(mulaw_expand(0xF0), 120);
        assert_eq!(mulaw_expand(0xEF), 132);
        assert_eq!(mulaw_expand(0x70), -120);

        let wav = wav_with_fmt(7, 1, 8000, 8, &[0xFF, 0x80]);
        let buf = decode_wav(&wav).unwrap();
        assert_eq!(buf.samples()[0], 0.0);
        assert_eq!(buf.samples()[1], 32124.0 / 32768.0);
    }

    #[test]
    fn mulaw_table_is_odd_and_monotone() {
        // positive codes 0xFF down to 0x80 grow in magnitude
        let positives: Vec<i16> = (0x80..=0xFFu8).rev().map(mulaw_expand).collect();
        assert!(positives.windows(2).all(|w| w[0] < w[1]));
        for b in 0x80..=0xFFu8 {
            assert_eq!(mulaw_expand(b), -mulaw_expand(b & 0x7F));
        }
    }

    #[test]
    fn rejects_unsupported_formats() {
        let stereo = wav_with_fmt(1, 2, 8000, 16, &[0; 8]);
        assert!(matches!(decode_wav(&stereo), Err(AudioError::UnsupportedFormat(_))));
        let float = wav_with_fmt(3, 1, 8000, 32, &[0; 8]);
        assert!(matches!(decode_wav(&float), Err(AudioError::UnsupportedFormat(_))));
        let alaw = wav_with_fmt(6, 1, 8000, 8, &[0; 8]);
        assert!(matches!(decode_wav(&alaw), Err(AudioError::UnsupportedFormat(_))));
        let pcm8 = wav_with_fmt(1, 1, 8000, 8, &[0; 8]);
        assert!(matches!(decode_wav(&pcm8), Err(AudioError::UnsupportedFormat(_))));
    }

    #[test]
    fn rejects_corrupt_containers() {
        assert!(matches!(decode_wav(b"nope"), Err(AudioError::CorruptContainer(_))));
        let mut wav = wav_with_fmt(1, 1, 8000, 16, &[0; 8]);
        wav.truncate(wav.len() - 4);
        assert!(matches!(decode_wav(&wav), Err(AudioError::CorruptContainer(_))));
    }

    #[test]
    fn resample_identity_at_8k() {
        let buf = AudioBuffer::new(vec![0.1, -0.2, 0.3], 8000).unwrap();
        let out = resample_to_8k(buf.clone()).unwrap();
        assert_eq!(out, buf);
    }

    #[test]
    fn resample_constant() {
        for rate in [16000, 44100, 48000] {
            let buf = AudioBuffer::new(vec![0.5; rate as usize], rate).unwrap();
            let out = resample_to_8k(buf).unwrap();
            assert_eq!(out.sample_rate(), 8000);
            assert!((7999..=8000).contains(&out.len()), "{rate}: {}", out.len());
            assert!(out.samples().iter().all(|&s| s == 0.5));
        }
    }

    #[test]
    fn resample_sine_matches_analytic() {
        for rate in [16000u32, 44100, 48000] {
            let tone = |t: f64| (2.0 * std::f64::consts::PI * 1000.0 * t).sin();
            let input: Vec<f32> = (0..rate)
                .map(|i| tone(i as f64 / rate as f64) as f32)
                .collect();
            let out = resample_to_8k(AudioBuffer::new(input, rate).unwrap()).unwrap();
            let worst = out
                .samples()
                .iter()
                .enumerate()
                .map(|(i, &s)| (s as f64 - tone(i as f64 / 8000.0)).abs())
                .fold(0.0, f64::max);
            assert!(worst < 0.02, "{rate} Hz: worst error {worst}");
        }
    }

    #[test]
    fn resample_rejects_odd_rates() {
        let buf = AudioBuffer::new(vec![0.0; 10], 22050).unwrap();
        assert_eq!(resample_to_8k(buf), Err(AudioError::UnsupportedRate(22050)));
    }

    #[test]
    fn segmentation_examples() {
        let buf = AudioBuffer::new(vec![0.0; 20000], 8000).unwrap();
        let segs = segment_seconds(&buf, "r").unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].index, segs[1].index), (0, 1));

        let short = AudioBuffer::new(vec![0.0; 7999], 8000).unwrap();
        assert!(segment_seconds(&short, "r").unwrap().is_empty());

        let one: Vec<f32> = (0..8000).map(|i| (i as f32 / 8000.0) - 0.5).collect();
        let buf = AudioBuffer::new(one.clone(), 8000).unwrap();
        let segs = segment_seconds(&buf, "r").unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].samples(), &one[..]);

        let wrong = AudioBuffer::new(vec![0.0; 16000], 16000).unwrap();
        assert!(matches!(
            segment_seconds(&wrong, "r"),
            Err(AudioError::WrongRate { .. })
        ));
    }

    proptest! {
        #[test]
        fn segments_concatenate_to_prefix(n in 0usize..40_000) {
            let samples: Vec<f32> = (0..n).map(|i| ((i % 200) as f32 / 100.0) - 1.0).collect();
            let buf = AudioBuffer::new(samples.clone(), 8000).unwrap();
            let segs = segment_seconds(&buf, "x").unwrap();
            let joined: Vec<f32> = segs.iter().flat_map(|s| s.samples().iter().copied()).collect();
            prop_assert_eq!(&joined[..], &samples[..8000 * (n / 8000)]);
        }

        #[test]
        fn pcm16_roundtrip_bit_exact(words in proptest::collection::vec(any::<i16>(), 0..4000)) {
            let data: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
            let wav = wav_with_fmt(1, 1, 8000, 16, &data);
            let first = decode_wav(&wav).unwrap();
            let again = decode_wav(&encode_wav_pcm16(&first)).unwrap();
            prop_assert_eq!(&first, &again);
            prop_assert_eq!(encode_wav_pcm16(&again), wav);
        }
    }
}
