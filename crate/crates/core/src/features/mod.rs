//! Audio and video feature streams at a shared 25 Hz frame rate.
//!
//! Audio goes waveform → 80-band log-mel at 100 Hz → per-utterance mean and
//! variance normalization → stacking of 4 neighbouring frames. Video arrives
//! as lip-ROI stand-in vectors already sampled at 25 Hz.

pub(crate) mod avtf;
mod frontend;
mod mel;

pub use avtf::{read_avtf, read_avtf_bytes, write_avtf, write_avtf_bytes, AvtfRecord};
pub use frontend::{audio_frontend, video_frontend};
pub use mel::{logmel, mel_filterbank, LOG_FLOOR};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const VIDEO_RATE_HZ: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Video,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Time-major `T × D` features of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    pub frames: Tensor,
    pub frame_rate_hz: f64,
    pub modality: Modality,
}

impl FeatureStream {
    pub fn new(frames: Tensor, frame_rate_hz: f64, modality: Modality) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::Shape(format!("feature stream must be rank 2, got {:?}", frames.shape())));
        }
        if frames.rows() == 0 {
            return Err(Error::Empty("feature stream"));
        }
        if !(frame_rate_hz > 0.0) {
            return Err(Error::InvalidArgument("frame rate must be positive".into()));
        }
        Ok(FeatureStream {
            frames,
            frame_rate_hz,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn truncated(&self, n: usize) -> FeatureStream {
        FeatureStream {
            frames: self.frames.truncate_rows(n),
            frame_rate_hz: self.frame_rate_hz,
            modality: self.modality,
        }
    }
}

/// Concatenates each run of `k` consecutive frames; the trailing remainder is dropped.
pub fn stack_frames(fs: &FeatureStream, k: usize) -> Result<FeatureStream> {
    if fs.modality != Modality::Audio {
        return Err(Error::InvalidArgument("frame stacking applies to audio streams".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("stack factor must be at least 1".into()));
    }
    let (t, d) = (fs.len(), fs.dim());
    if t < k {
        return Err(Error::Shape(format!("{t} frames cannot be stacked by {k}")));
    }
    let out_t = t / k;
    let data = fs.frames.data()[..out_t * k * d].to_vec();
    FeatureStream::new(Tensor::matrix(out_t, k * d, data)?, fs.frame_rate_hz / k as f64, Modality::Audio)
}

/// Per-utterance mean and variance normalization of every feature dimension.
pub fn normalize(fs: &FeatureStream) -> FeatureStream {
    let (t, d) = (fs.len(), fs.dim());
    let mut out = fs.frames.clone();
    for c in 0..d {
        let mean = (0..t).map(|r| fs.frames.row(r)[c]).sum::<f64>() / t as f64;
        let var = (0..t).map(|r| (fs.frames.row(r)[c] - mean).powi(2)).sum::<f64>() / t as f64;
        let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
        for r in 0..t {
            let v = &mut out.row_mut(r)[c];
            *v = (*v - mean) * scale;
        }
    }
    FeatureStream {
        frames: out,
        frame_rate_hz: fs.frame_rate_hz,
        modality: fs.modality,
    }
}

/// Settings of the audio feature pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AudioFeatureConfig {
    pub n_mels: usize,
    pub hop_ms: f64,
    pub stack: usize,
}

impl Default for AudioFeatureConfig {
    fn default() -> Self {
        AudioFeatureConfig {
            n_mels: 80,
            hop_ms: 10.0,
            stack: 4,
        }
    }
}

/// Waveform to normalized, stacked log-mel features.
pub fn audio_features(wave: &Waveform, cfg: &AudioFeatureConfig) -> Result<FeatureStream> {
    let mel = logmel(wave, cfg.n_mels, cfg.hop_ms)?;
    stack_frames(&normalize(&mel), cfg.stack)
}
