//! Waveforms, WAV persistence, peak-decibel measurement, and clipping.
//!
//! Samples are held as `f64` but live on the signed 16-bit scale: the
//! legal range is `[-32768, 32767]`. Optimization works on real values;
//! quantization to integers happens only when a file is written.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

/// Full-scale magnitude: 2^15.
pub const FULL_SCALE: f64 = 32768.0;
/// Most negative representable sample.
pub const SAMPLE_MIN: f64 = -32768.0;
/// Most positive representable sample (2^15 - 1).
pub const SAMPLE_MAX: f64 = 32767.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("unsupported wav format: {reason}")]
    UnsupportedFormat { reason: String },
    #[error("malformed wav file: {reason}")]
    Malformed { reason: String },
    #[error("sample {value} at index {index} outside [{SAMPLE_MIN}, {SAMPLE_MAX}]")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("decibel level of an all-zero waveform is undefined")]
    UndefinedLevel,
    #[error("waveform lengths differ: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("waveform is empty")]
    Empty,
}

/// A mono waveform of real-valued samples on the 16-bit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Waveform {
            samples,
            sample_rate,
        }
    }

    /// 16 kHz waveform, the rate the rest of the pipeline defaults to.
    pub fn from_samples(samples: Vec<f64>) -> Self {
        Waveform::new(samples, 16_000)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
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

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, &s| m.max(s.abs()))
    }

    /// Round every sample to the nearest integer (ties away from zero).
    pub fn quantized(&self) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s.round()).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Clamp every sample into the representable range [-2^15, 2^15 - 1].
pub fn clip(x: &Waveform) -> Waveform {
    Waveform {
        samples: x
            .samples
            .iter()
            .map(|&s| s.clamp(SAMPLE_MIN, SAMPLE_MAX))
            .collect(),
        sample_rate: x.sample_rate,
    }
}

/// Peak loudness in decibels: max over samples of 20·log10(|s|).
///
/// The magnitude is taken before the log so negative-going peaks count;
/// an all-zero waveform has no defined level and is an error.
pub fn db(x: &Waveform) -> Result<f64, AudioError> {
    let peak = x.peak();
    if peak == 0.0 {
        return Err(AudioError::UndefinedLevel);
    }
    Ok(20.0 * peak.log10())
}

/// Loudness of a perturbation relative to a source: dB(delta) − dB(x).
/// Negative values mean the perturbation peaks quieter than the source.
pub fn db_distortion(delta: &Waveform, x: &Waveform) -> Result<f64, AudioError> {
    if delta.len() != x.len() {
        return Err(AudioError::LengthMismatch {
            lhs: delta.len(),
            rhs: x.len(),
        });
    }
    Ok(db(delta)? - db(x)?)
}

/// Read a PCM 16-bit mono WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_wav(&bytes)
}

/// Write a waveform as PCM 16-bit mono. Samples are rounded to the
/// nearest integer and must already be inside the legal range.
pub fn write_wav(path: impl AsRef<Path>, x: &Waveform) -> Result<(), AudioError> {
    let path = path.as_ref();
    let bytes = encode_wav(x)?;
    fs::write(path, bytes).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    let malformed = |reason: &str| AudioError::Malformed {
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(malformed("chunk extends past end of file"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("fmt chunk too short"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| malformed("missing fmt chunk"))?;
    if format != 1 {
        return Err(AudioError::UnsupportedFormat {
            reason: format!("compressed or non-PCM format tag {format}"),
        });
    }
    if channels != 1 {
        return Err(AudioError::UnsupportedFormat {
            reason: format!("{channels} channels, only mono is supported"),
        });
    }
    if bits != 16 {
        return Err(AudioError::UnsupportedFormat {
            reason: format!("{bits}-bit samples, only 16-bit is supported"),
        });
    }
    let data = data.ok_or_else(|| malformed("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(malformed("odd data chunk length"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64)
        .collect();
    Ok(Waveform::new(samples, rate))
}

pub fn encode_wav(x: &Waveform) -> Result<Vec<u8>, AudioError> {
    let mut pcm = Vec::with_capacity(x.len() * 2);
    for (index, &s) in x.samples.iter().enumerate() {
        let rounded = s.round();
        if !(SAMPLE_MIN..=SAMPLE_MAX).contains(&rounded) {
            return Err(AudioError::SampleOutOfRange { index, value: s });
        }
        pcm.extend_from_slice(&(rounded as i16).to_le_bytes());
    }
    let data_len = pcm.len() as u32;
    let byte_rate = x.sample_rate * 2;
    let mut out = Vec::with_capacity(44 + pcm.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&x.sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.extend_from_slice(&pcm);
    Ok(out)
}
