use super::{FeatureStream, Modality, VIDEO_RATE_HZ};
use crate::error::{Error, Result};
use crate::model::{network, ModelParams};
use crate::numerics::Graph;

/// Projects stacked log-mel frames to the model dimension.
pub fn audio_frontend(stacked: &FeatureStream, params: &ModelParams) -> Result<FeatureStream> {
    if stacked.modality != Modality::Audio {
        return Err(Error::InvalidArgument("audio frontend needs an audio stream".into()));
    }
    let mut g = Graph::new(&params.store);
    let x = g.input(stacked.frames.clone())?;
    let y = network::audio_frontend(&mut g, params, x)?;
    FeatureStream::new(g.value(y).clone(), stacked.frame_rate_hz, Modality::Audio)
}

/// Embeds 25 Hz lip-ROI vectors; frame count is preserved.
pub fn video_frontend(roi: &FeatureStream, params: &ModelParams) -> Result<FeatureStream> {
    if roi.modality != Modality::Video {
        return Err(Error::InvalidArgument("video frontend needs a video stream".into()));
    }
    if (roi.frame_rate_hz - VIDEO_RATE_HZ).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "video must be sampled at {VIDEO_RATE_HZ} Hz, got {}",
            roi.frame_rate_hz
        )));
    }
    let mut g = Graph::new(&params.store);
    let x = g.input(roi.frames.clone())?;
    let y = network::video_frontend(&mut g, params, x)?;
    FeatureStream::new(g.value(y).clone(), roi.frame_rate_hz, Modality::Video)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::{finite_diff_check, Tensor};

    fn cfg(dim: usize, audio_in: usize) -> ModelConfig {
        ModelConfig {
            dim,
            heads: 1,
            ffn_dim: 4,
            n_mels: audio_in,
            audio_stack: 1,
            video_in: 3,
            vocab: 3,
            enc_layers: 0,
            dec_layers: 0,
            ..ModelConfig::default()
        }
    }

    fn stream(t: usize, d: usize, m: Modality, rate: f64) -> FeatureStream {
        let data = (0..t * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        FeatureStream::new(Tensor::matrix(t, d, data).unwrap(), rate, m).unwrap()
    }

    #[test]
    fn video_zero_input_zero_bias_gives_zero() {
        let p = ModelParams::init(&cfg(6, 4), 3).unwrap();
        let roi = FeatureStream::new(Tensor::zeros(vec![50, 3]), 25.0, Modality::Video).unwrap();
        let out = video_frontend(&roi, &p).unwrap();
        assert_eq!((out.len(), out.dim()), (50, 6));
        assert!(out.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn video_is_deterministic_and_checks_rate() {
        let p = ModelParams::init(&cfg(6, 4), 3).unwrap();
        let roi = stream(7, 3, Modality::Video, 25.0);
        assert_eq!(video_frontend(&roi, &p).unwrap(), video_frontend(&roi, &p).unwrap());
        assert!(video_frontend(&stream(7, 3, Modality::Video, 30.0), &p).is_err());
        assert!(video_frontend(&stream(7, 4, Modality::Video, 25.0), &p).is_err());
    }

    #[test]
    fn audio_identity_passthrough() {
        let mut p = ModelParams::init(&cfg(4, 4), 1).unwrap();
        let id = p.layout.audio.w;
        *p.store.get_mut(id) = Tensor::identity(4);
        let x = stream(2, 4, Modality::Audio, 25.0);
        let y = audio_frontend(&x, &p).unwrap();
        assert_eq!(y.frames, x.frames);
        assert!(audio_frontend(&stream(2, 5, Modality::Audio, 25.0), &p).is_err());
    }

    #[test]
    fn audio_frontend_gradient_matches_finite_differences() {
        let p = ModelParams::init(&cfg(4, 6), 5).unwrap();
        let x = stream(3, 6, Modality::Audio, 25.0).frames;
        let loss = |ps: &crate::numerics::ParamSet| -> Result<(f64, crate::numerics::Gradient)> {
            let mut g = Graph::new(ps);
            let xi = g.input(x.clone())?;
            let y = network::audio_frontend(&mut g, &p, xi)?;
            let y2 = g.mul(y, y)?;
            let s = g.sum(y2)?;
            let v = g.scalar(s);
            Ok((v, g.backward(s)?))
        };
        let (_, grad) = loss(&p.store).unwrap();
        let report = finite_diff_check(&p.store, &grad, |ps| loss(ps).map(|r| r.0), 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }
}
