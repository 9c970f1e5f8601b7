//! The AV-S2UT network: modality frontends, additive fusion with modality
//! dropout, optional strided adaptor, conformer encoder and an
//! autoregressive unit decoder.

mod checkpoint;
mod config;
mod decode;
mod fusion;
pub(crate) mod network;
mod params;
mod sequence;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, params_from_bytes, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{parse_kv, ModelConfig};
pub use decode::{beam_search, decode_step, greedy_decode, score_sequence};
pub use fusion::{fuse, FusionCase, FusionMode};
pub use params::ModelParams;
pub use sequence::UnitSequence;

use crate::error::{Error, Result};
use crate::features::{FeatureStream, Modality};
use crate::numerics::{Graph, Tensor, Var};

/// Strided convolution from the audio frontend rate down to the fusion rate.
pub fn adapt(f_a: &FeatureStream, params: &ModelParams) -> Result<FeatureStream> {
    if f_a.dim() != params.config.dim {
        return Err(Error::Shape(format!("adaptor input dim {} vs model dim {}", f_a.dim(), params.config.dim)));
    }
    let mut g = Graph::new(&params.store);
    let x = g.input(f_a.frames.clone())?;
    let y = network::adaptor(&mut g, params, x)?;
    let rate = f_a.frame_rate_hz / params.config.adaptor_stride as f64;
    FeatureStream::new(g.value(y).clone(), rate, Modality::Audio)
}

/// Contextual representations `X` of a fused stream.
pub fn encode(fused: &FeatureStream, params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new(&params.store);
    let x = g.input(fused.frames.clone())?;
    let y = network::encoder(&mut g, params, x)?;
    Ok(g.value(y).clone())
}

/// Frontends, fusion and encoder in one pass. `audio` is stacked log-mel
/// frames and `video` ROI vectors; either may be absent.
pub fn encode_source(
    params: &ModelParams,
    audio: Option<&Tensor>,
    video: Option<&Tensor>,
    case: FusionCase,
) -> Result<Tensor> {
    let mut g = Graph::new(&params.store);
    let x = network::fused_input(&mut g, params, audio, video, case)?;
    let y = network::encoder(&mut g, params, x)?;
    Ok(g.value(y).clone())
}

/// Summed token negative log-likelihood of `target` (plus eos) given the source.
pub fn utterance_nll(
    g: &mut Graph,
    params: &ModelParams,
    audio: Option<&Tensor>,
    video: Option<&Tensor>,
    case: FusionCase,
    target: &UnitSequence,
) -> Result<Var> {
    if target.len() > params.config.max_target_len {
        return Err(Error::InvalidArgument(format!(
            "target of {} units exceeds max_target_len {}",
            target.len(),
            params.config.max_target_len
        )));
    }
    target.check_vocab(params.config.vocab)?;
    let x = network::fused_input(g, params, audio, video, case)?;
    let mem = network::encoder(g, params, x)?;
    let inputs: Vec<usize> = std::iter::once(params.config.bos()).chain(target.units().iter().copied()).collect();
    let targets: Vec<usize> = target.units().iter().copied().chain(std::iter::once(params.config.eos())).collect();
    let logits = network::decoder_logits(g, params, mem, &inputs)?;
    let mean = g.cross_entropy(logits, &targets)?;
    g.scale(mean, targets.len() as f64)
}
