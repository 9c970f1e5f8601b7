use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureStream, Modality};
use crate::numerics::Tensor;

/// Which modalities reach the encoder for one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionCase {
    Both,
    /// Video features masked to zero.
    AudioOnly,
    /// Audio features masked to zero.
    VideoOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionMode {
    /// Modality dropout: with probability `1 − p` keep both, otherwise mask
    /// one modality chosen uniformly.
    TrainStochastic { p: f64 },
    InferenceBoth,
    ForceAudioOnly,
    ForceVideoOnly,
}

impl FusionMode {
    pub const TRAIN_DEFAULT: FusionMode = FusionMode::TrainStochastic { p: 0.5 };

    /// Draws the case for one utterance; only the training mode consumes randomness.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> FusionCase {
        match *self {
            FusionMode::TrainStochastic { p } => {
                let u: f64 = rng.random();
                if u >= p {
                    FusionCase::Both
                } else if u < p / 2.0 {
                    FusionCase::AudioOnly
                } else {
                    FusionCase::VideoOnly
                }
            }
            FusionMode::InferenceBoth => FusionCase::Both,
            FusionMode::ForceAudioOnly => FusionCase::AudioOnly,
            FusionMode::ForceVideoOnly => FusionCase::VideoOnly,
        }
    }
}

/// Elementwise fusion of frontend outputs; absent or masked streams count as zero.
pub fn fuse<R: Rng + ?Sized>(
    f_a: Option<&FeatureStream>,
    f_v: Option<&FeatureStream>,
    mode: FusionMode,
    rng: &mut R,
) -> Result<FeatureStream> {
    let reference = match (f_a, f_v) {
        (None, None) => return Err(Error::InvalidArgument("fusion needs at least one modality".into())),
        (Some(a), Some(v)) => {
            if a.len() != v.len() || a.dim() != v.dim() {
                return Err(Error::Shape(format!(
                    "audio {}x{} vs video {}x{}",
                    a.len(),
                    a.dim(),
                    v.len(),
                    v.dim()
                )));
            }
            a
        }
        (Some(a), None) => a,
        (None, Some(v)) => v,
    };
    let case = mode.draw(rng);
    let mut out = Tensor::zeros(vec![reference.len(), reference.dim()]);
    let keep_a = f_a.filter(|_| case != FusionCase::VideoOnly);
    let keep_v = f_v.filter(|_| case != FusionCase::AudioOnly);
    for s in [keep_a, keep_v].into_iter().flatten() {
        for (o, x) in out.data_mut().iter_mut().zip(s.frames.data()) {
            *o += x;
        }
    }
    FeatureStream::new(out, reference.frame_rate_hz, Modality::Audio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct ZeroRng;

    impl RngCore for ZeroRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0);
        }
    }

    fn stream(vals: &[f64], m: Modality) -> FeatureStream {
        FeatureStream::new(Tensor::matrix(vals.len(), 1, vals.to_vec()).unwrap(), 25.0, m).unwrap()
    }

    #[test]
    fn masked_video_branch_returns_audio() {
        let a = stream(&[1.0, 2.0], Modality::Audio);
        let v = stream(&[10.0, 20.0], Modality::Video);
        // u = 0 falls in the first masked interval: video zeroed
        let mut rng = ZeroRng;
        let out = fuse(Some(&a), Some(&v), FusionMode::TRAIN_DEFAULT, &mut rng).unwrap();
        assert_eq!(out.frames, a.frames);
    }

    #[test]
    fn inference_sums_and_treats_absent_as_zero() {
        let a = stream(&[1.0, 2.0], Modality::Audio);
        let v = stream(&[10.0, 20.0], Modality::Video);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let both = fuse(Some(&a), Some(&v), FusionMode::InferenceBoth, &mut rng).unwrap();
        assert_eq!(both.frames.data(), &[11.0, 22.0]);
        let zero = stream(&[0.0, 0.0], Modality::Video);
        let out = fuse(Some(&a), Some(&zero), FusionMode::InferenceBoth, &mut rng).unwrap();
        assert_eq!(out.frames, a.frames);
        let only = fuse(Some(&a), None, FusionMode::InferenceBoth, &mut rng).unwrap();
        assert_eq!(only.frames, a.frames);
        let vo = fuse(Some(&a), Some(&v), FusionMode::ForceVideoOnly, &mut rng).unwrap();
        assert_eq!(vo.frames, v.frames);
    }

    #[test]
    fn errors_on_missing_or_mismatched() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(fuse(None, None, FusionMode::InferenceBoth, &mut rng).is_err());
        let a = stream(&[1.0, 2.0], Modality::Audio);
        let v = stream(&[1.0], Modality::Video);
        assert!(fuse(Some(&a), Some(&v), FusionMode::InferenceBoth, &mut rng).is_err());
    }

    #[test]
    fn branch_frequencies_match_stated_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let i = match FusionMode::TRAIN_DEFAULT.draw(&mut rng) {
                FusionCase::Both => 0,
                FusionCase::AudioOnly => 1,
                FusionCase::VideoOnly => 2,
            };
            counts[i] += 1;
        }
        for (c, p) in counts.iter().zip([0.5, 0.25, 0.25]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn inference_modes_never_consume_randomness() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let before = rng.clone();
        for m in [FusionMode::InferenceBoth, FusionMode::ForceAudioOnly, FusionMode::ForceVideoOnly] {
            m.draw(&mut rng);
        }
        assert_eq!(rng, before);
    }
}
