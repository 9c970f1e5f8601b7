//! Synthetic noise categories and exact-SNR mixing.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::Waveform;
use crate::util::rng_for;

pub const DEFAULT_SNR_GRID: [f64; 5] = [-10.0, -5.0, 0.0, 5.0, 10.0];

/// Talkers summed into one babble clip.
pub const BABBLE_TALKERS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseCategory {
    Babble,
    Music,
    Speech,
}

impl NoiseCategory {
    pub const ALL: [NoiseCategory; 3] = [NoiseCategory::Babble, NoiseCategory::Music, NoiseCategory::Speech];

    pub fn name(self) -> &'static str {
        match self {
            NoiseCategory::Babble => "babble",
            NoiseCategory::Music => "music",
            NoiseCategory::Speech => "speech",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "babble" => Ok(NoiseCategory::Babble),
            "music" => Ok(NoiseCategory::Music),
            "speech" => Ok(NoiseCategory::Speech),
            _ => Err(Error::InvalidArgument(format!(
                "unknown noise category {s:?} (expected babble, music or speech)"
            ))),
        }
    }
}

/// Noise condition for one evaluation cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSpec {
    pub category: NoiseCategory,
    pub snr_db: f64,
    pub seed: u64,
}

impl MixSpec {
    pub fn new(category: NoiseCategory, snr_db: f64, seed: u64) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::InvalidArgument("SNR must be finite".into()));
        }
        Ok(MixSpec { category, snr_db, seed })
    }
}

pub fn rms(wave: &Waveform) -> Result<f64> {
    rms_of(&wave.samples)
}

fn rms_of(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty("waveform"));
    }
    Ok((x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt())
}

/// Noise stretched to `len` samples: tiled when short, cropped at a seeded offset when long.
pub fn fit_noise(noise: &Waveform, len: usize, seed: u64) -> Result<Vec<f64>> {
    if noise.is_empty() {
        return Err(Error::Empty("noise"));
    }
    let n = noise.len();
    if n <= len {
        return Ok((0..len).map(|i| noise.samples[i % n]).collect());
    }
    let offset = rng_for(seed, &[0x0ff5]).random_range(0..=n - len);
    Ok(noise.samples[offset..offset + len].to_vec())
}

/// Gain applied to noise of RMS `noise_rms` to sit `snr_db` below a signal of RMS `signal_rms`.
pub fn noise_gain(signal_rms: f64, noise_rms: f64, snr_db: f64) -> f64 {
    signal_rms / (noise_rms * 10f64.powf(snr_db / 20.0))
}

/// `signal + g · noise` with `g` chosen so the scaled noise is exactly `snr_db` below the signal.
pub fn mix_at_snr(signal: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    if signal.sample_rate != noise.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            signal.sample_rate, noise.sample_rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument("SNR must be finite".into()));
    }
    let s_rms = rms(signal)?;
    if s_rms == 0.0 {
        return Err(Error::InvalidArgument("cannot mix noise into a silent signal".into()));
    }
    let fitted = fit_noise(noise, signal.len(), seed)?;
    let n_rms = rms_of(&fitted)?;
    if n_rms == 0.0 {
        return Err(Error::InvalidArgument("noise is silent".into()));
    }
    let g = noise_gain(s_rms, n_rms, snr_db);
    let samples = signal.samples.iter().zip(&fitted).map(|(s, n)| s + g * n).collect();
    Waveform::new(samples, signal.sample_rate)
}

/// One talker: voiced syllables with two moving formants, separated by short pauses.
fn speech_like(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut pos = 0;
    let f0_base = rng.random_range(95.0..230.0);
    let mut first = true;
    while pos < len {
        if !first && rng.random_bool(0.3) {
            pos += (rng.random_range(0.04..0.15) * sr) as usize;
            continue;
        }
        first = false;
        let dur = ((rng.random_range(0.08..0.25) * sr) as usize).max(1);
        let f0 = f0_base * rng.random_range(0.85..1.2);
        let f1 = rng.random_range(300.0..900.0);
        let f2 = rng.random_range(900.0..2600.0);
        let amp = rng.random_range(0.5..1.0);
        let harmonics = ((sr / 2.0 - 200.0) / f0).floor().min(40.0) as usize;
        let weights: Vec<(f64, f64)> = (1..=harmonics)
            .map(|h| {
                let f = h as f64 * f0;
                let w = (-((f - f1) / 180.0).powi(2)).exp() + 0.6 * (-((f - f2) / 260.0).powi(2)).exp() + 0.02;
                (f, w)
            })
            .collect();
        let phases: Vec<f64> = weights.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        for i in 0..dur.min(len - pos) {
            let t = i as f64 / sr;
            let env = (PI * i as f64 / dur as f64).sin().powi(2);
            let s: f64 = weights
                .iter()
                .zip(&phases)
                .map(|((f, w), ph)| w * (2.0 * PI * f * t + ph).sin())
                .sum();
            out[pos + i] += amp * env * s;
        }
        pos += dur;
    }
    out
}

/// Chords of harmonic notes with decaying envelopes.
fn music_like(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f64> {
    const SCALE: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
    let mut out = vec![0.0; len];
    let mut pos = 0;
    let root = rng.random_range(-12..0);
    while pos < len {
        let dur = ((rng.random_range(0.2..0.5) * sr) as usize).max(1);
        let notes = rng.random_range(2..=3);
        for _ in 0..notes {
            let step = SCALE[rng.random_range(0..SCALE.len())] + 12 * rng.random_range(0..2) + root;
            let f0 = 440.0 * 2f64.powf(step as f64 / 12.0);
            let decay = rng.random_range(2.0..6.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            for i in 0..dur.min(len - pos) {
                let t = i as f64 / sr;
                let env = (-decay * t).exp() * (1.0 - (-t * 200.0).exp());
                let s: f64 = (1..=6).map(|h| (2.0 * PI * f0 * h as f64 * t + phase * h as f64).sin() / h as f64).sum();
                out[pos + i] += 0.4 * env * s;
            }
        }
        pos += dur;
    }
    out
}

/// Deterministic noise of `category` lasting `duration_s` seconds.
pub fn synth_noise(category: NoiseCategory, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if !(duration_s > 0.0) || sample_rate == 0 {
        return Err(Error::InvalidArgument("noise duration and sample rate must be positive".into()));
    }
    let sr = sample_rate as f64;
    let len = ((duration_s * sr).round() as usize).max(1);
    let samples = match category {
        NoiseCategory::Speech => speech_like(&mut rng_for(seed, &[category.tag(), 0]), len, sr),
        NoiseCategory::Music => music_like(&mut rng_for(seed, &[category.tag(), 0]), len, sr),
        NoiseCategory::Babble => {
            let mut acc = vec![0.0; len];
            for talker in 0..BABBLE_TALKERS {
                let s = speech_like(&mut rng_for(seed, &[category.tag(), talker as u64 + 1]), len, sr);
                acc.iter_mut().zip(&s).for_each(|(a, v)| *a += v);
            }
            acc
        }
    };
    Waveform::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::logmel;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16000).unwrap()
    }

    #[test]
    fn rms_examples() {
        assert_eq!(rms(&wave(vec![0.0; 10])).unwrap(), 0.0);
        assert_eq!(rms(&wave(vec![1.0; 10])).unwrap(), 1.0);
        let sine = wave((0..160_000).map(|n| (2.0 * PI * 440.0 * n as f64 / 16000.0).sin()).collect());
        assert!((rms(&sine).unwrap() - 0.5f64.sqrt()).abs() < 1e-3);
        assert!(rms(&wave(vec![])).is_err());
    }

    #[test]
    fn gain_formula_examples() {
        assert!((noise_gain(1.0, 1.0, 0.0) - 1.0).abs() < 1e-15);
        assert!((noise_gain(2.0, 2.0, 10.0) - 0.316228).abs() < 1e-6);
        assert!((noise_gain(0.5, 0.5, -10.0) - 3.162278).abs() < 1e-6);
    }

    fn achieved_snr(signal: &Waveform, mixed: &Waveform) -> f64 {
        let noise: Vec<f64> = mixed.samples.iter().zip(&signal.samples).map(|(m, s)| m - s).collect();
        20.0 * (rms(signal).unwrap() / rms_of(&noise).unwrap()).log10()
    }

    #[test]
    fn achieved_snr_matches_request() {
        let signal = synth_noise(NoiseCategory::Speech, 1.0, 16000, 3).unwrap();
        for cat in NoiseCategory::ALL {
            // shorter noise is tiled, longer noise cropped
            for dur in [0.3, 2.5] {
                let noise = synth_noise(cat, dur, 16000, 9).unwrap();
                for snr in DEFAULT_SNR_GRID {
                    let mixed = mix_at_snr(&signal, &noise, snr, 4).unwrap();
                    assert_eq!(mixed.len(), signal.len());
                    assert!((achieved_snr(&signal, &mixed) - snr).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mixing_is_linear_in_signal_amplitude() {
        let signal = synth_noise(NoiseCategory::Speech, 0.5, 16000, 1).unwrap();
        let noise = synth_noise(NoiseCategory::Babble, 0.8, 16000, 2).unwrap();
        let a = mix_at_snr(&signal, &noise, 5.0, 7).unwrap();
        let scaled = wave(signal.samples.iter().map(|v| v * 3.0).collect());
        let b = mix_at_snr(&scaled, &noise, 5.0, 7).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((3.0 * x - y).abs() < 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn silent_inputs_are_rejected() {
        let s = wave(vec![0.5; 100]);
        assert!(mix_at_snr(&wave(vec![0.0; 100]), &s, 0.0, 0).is_err());
        assert!(mix_at_snr(&s, &wave(vec![0.0; 100]), 0.0, 0).is_err());
        assert!(mix_at_snr(&s, &s, f64::NAN, 0).is_err());
    }

    #[test]
    fn synthesis_is_deterministic_and_validated() {
        for cat in NoiseCategory::ALL {
            let a = synth_noise(cat, 0.3, 16000, 5).unwrap();
            let b = synth_noise(cat, 0.3, 16000, 5).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 4800);
            assert!(rms(&a).unwrap() > 0.0);
            assert_ne!(a, synth_noise(cat, 0.3, 16000, 6).unwrap());
        }
        assert!(synth_noise(NoiseCategory::Music, 0.0, 16000, 1).is_err());
        assert!("static".parse::<NoiseCategory>().is_err());
        assert_eq!("babble".parse::<NoiseCategory>().unwrap(), NoiseCategory::Babble);
    }

    /// Mean over bands of the temporal variance of log-mel energies.
    fn envelope_variance(w: &Waveform) -> f64 {
        let m = logmel(w, 24, 10.0).unwrap();
        let (t, d) = (m.len(), m.dim());
        (0..d)
            .map(|c| {
                let col: Vec<f64> = (0..t).map(|r| m.frames.row(r)[c]).collect();
                let mean = col.iter().sum::<f64>() / t as f64;
                col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64
            })
            .sum::<f64>()
            / d as f64
    }

    #[test]
    fn babble_envelope_is_flatter_than_single_talker_speech() {
        let (mut babble, mut speech) = (0.0, 0.0);
        let mut wins = 0;
        for seed in 0..100 {
            let b = envelope_variance(&synth_noise(NoiseCategory::Babble, 0.5, 16000, seed).unwrap());
            let s = envelope_variance(&synth_noise(NoiseCategory::Speech, 0.5, 16000, seed).unwrap());
            babble += b;
            speech += s;
            wins += (b < s) as usize;
        }
        assert!(babble < speech, "babble {babble} speech {speech}");
        assert!(wins >= 90, "babble flatter on {wins}/100 seeds");
    }
}
