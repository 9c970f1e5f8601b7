use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::{FeatureStream, Modality, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Natural-log floor applied to filterbank energies.
pub const LOG_FLOOR: f64 = -23.025850929940457; // ln(1e-10)

const WINDOW_MS: f64 = 25.0;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning `0..sample_rate/2`.
///
/// Returns `n_mels × (n_fft/2 + 1)` weights, evaluated at each bin's exact frequency.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = b as f64 * sample_rate as f64 / n_fft as f64;
                    let rise = (f - lo) / (center - lo);
                    let fall = (hi - f) / (hi - center);
                    rise.min(fall).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Log mel-filterbank energies: 25 ms periodic-Hann frames, no padding, no pre-emphasis.
pub fn logmel(wave: &Waveform, n_mels: usize, hop_ms: f64) -> Result<FeatureStream> {
    if n_mels == 0 || !(hop_ms > 0.0) {
        return Err(Error::InvalidArgument("n_mels and hop must be positive".into()));
    }
    let sr = wave.sample_rate as f64;
    let win = (WINDOW_MS * sr / 1000.0).round() as usize;
    let hop = ((hop_ms * sr / 1000.0).round() as usize).max(1);
    if wave.len() < win {
        return Err(Error::Shape(format!(
            "waveform of {} samples is shorter than one {} ms window ({} samples)",
            wave.len(),
            WINDOW_MS,
            win
        )));
    }
    let n_fft = win.next_power_of_two();
    let n_frames = (wave.len() - win) / hop + 1;
    let window: Vec<f64> = (0..win).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos()).collect();
    let bank = mel_filterbank(n_mels, n_fft, wave.sample_rate);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut out = Vec::with_capacity(n_frames * n_mels);
    for f in 0..n_frames {
        let start = f * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < win {
                Complex::new(wave.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(1e-10).ln());
        }
    }
    FeatureStream::new(Tensor::matrix(n_frames, n_mels, out)?, 1000.0 / hop_ms, Modality::Audio)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_is_the_log_floor() {
        let wave = Waveform::new(vec![0.0; 4000], 16000).unwrap();
        let m = logmel(&wave, 80, 10.0).unwrap();
        assert!(m.frames.data().iter().all(|&v| v == LOG_FLOOR));
        assert_eq!(m.frame_rate_hz, 100.0);
        assert_eq!(m.dim(), 80);
    }

    #[test]
    fn one_second_gives_98_frames() {
        let wave = Waveform::new(vec![0.1; 16000], 16000).unwrap();
        assert_eq!(logmel(&wave, 80, 10.0).unwrap().len(), (16000 - 400) / 160 + 1);
        assert_eq!(logmel(&wave, 80, 10.0).unwrap().len(), 98);
    }

    #[test]
    fn too_short_is_an_error() {
        let wave = Waveform::new(vec![0.0; 399], 16000).unwrap();
        assert!(logmel(&wave, 80, 10.0).is_err());
    }

    #[test]
    fn pure_tone_peaks_in_its_band_and_falls_off() {
        let freq = 1000.0;
        let samples = (0..16000).map(|n| (2.0 * PI * freq * n as f64 / 16000.0).sin()).collect();
        let m = logmel(&Waveform::new(samples, 16000).unwrap(), 80, 10.0).unwrap();
        let frame = m.frames.row(10);

        // oracle: the filter with the largest response at exactly `freq`
        let bank = mel_filterbank(80, 512, 16000);
        let bin = (freq * 512.0 / 16000.0).round() as usize;
        let expected = (0..80)
            .max_by(|&a, &b| bank[a][bin].partial_cmp(&bank[b][bin]).unwrap())
            .unwrap();
        let peak = (0..80).max_by(|&a, &b| frame[a].partial_cmp(&frame[b]).unwrap()).unwrap();
        assert!((peak as i64 - expected as i64).abs() <= 1, "peak {peak} expected {expected}");

        // falloff across the main lobe, then everything well below the peak
        for b in peak + 1..peak + 4 {
            assert!(frame[b] < frame[b - 1], "band {b}");
        }
        for b in peak - 3..peak {
            assert!(frame[b] < frame[b + 1], "band {b}");
        }
        for b in (0..80usize).filter(|b| b.abs_diff(peak) >= 4) {
            assert!(frame[b] < frame[peak] - 10.0, "band {b}");
        }
        assert!(frame[0] < frame[peak] - 20.0 && frame[79] < frame[peak] - 30.0);
    }

    #[test]
    fn matches_a_direct_dft() {
        let samples: Vec<f64> = (0..1200).map(|n| ((n * 7919) % 113) as f64 / 113.0 - 0.5).collect();
        let wave = Waveform::new(samples.clone(), 16000).unwrap();
        let m = logmel(&wave, 20, 10.0).unwrap();
        let bank = mel_filterbank(20, 512, 16000);
        for f in [0, 3, m.len() - 1] {
            let power: Vec<f64> = (0..257)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for n in 0..400 {
                        let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / 400.0).cos();
                        let a = -2.0 * PI * (k * n) as f64 / 512.0;
                        re += samples[f * 160 + n] * w * a.cos();
                        im += samples[f * 160 + n] * w * a.sin();
                    }
                    re * re + im * im
                })
                .collect();
            for (band, filt) in bank.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                assert!((m.frames.row(f)[band] - e.max(1e-10).ln()).abs() < 1e-9);
            }
        }
    }
}
