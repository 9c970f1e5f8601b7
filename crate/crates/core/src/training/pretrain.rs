//! Simplified masked prediction: span-mask each input stream, encode the
//! corrupted fusion and predict k-means cluster ids of the clean audio at
//! masked positions.

use rand::Rng;

use super::{inputs_for, learning_rate, Adam, MetricsRow, TrainConfig};
use crate::data::{Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::model::{network, FusionCase, ModelParams};
use crate::numerics::{Gradient, Graph, Tensor};
use crate::units::{kmeans, Codebook};
use crate::util::{hash_str, rng_for};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub n_clusters: usize,
    pub kmeans_iters: usize,
    pub span: usize,
    pub mask_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            train: TrainConfig::default(),
            n_clusters: 32,
            kmeans_iters: 20,
            span: 3,
            mask_prob: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Pretrained frontends, adaptor and encoder; the decoder is untouched.
    pub params: ModelParams,
    pub codebook: Codebook,
    pub metrics: Vec<MetricsRow>,
}

/// Marks spans of `span` frames whose starts are drawn with probability
/// `prob / span`, so about `prob` of the frames end up masked.
pub fn span_mask(len: usize, span: usize, prob: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; len];
    let p_start = (prob / span.max(1) as f64).clamp(0.0, 1.0);
    for s in 0..len {
        if rng.random::<f64>() < p_start {
            for m in &mut mask[s..(s + span).min(len)] {
                *m = true;
            }
        }
    }
    mask
}

const MAX_CLUSTER_POINTS: usize = 20_000;

fn stride(params: &ModelParams) -> usize {
    if params.config.adaptor {
        params.config.adaptor_stride
    } else {
        1
    }
}

/// Cluster id of every fused frame, from the clean audio row it starts at.
fn frame_targets(e: &Example, cb: &Codebook, step: usize) -> Result<Vec<usize>> {
    let a = e.audio.as_ref().ok_or_else(|| Error::InvalidArgument(format!("{}: no audio features", e.id)))?;
    Ok((0..a.rows()).step_by(step).map(|r| cb.nearest(a.row(r)).0).collect())
}

fn zero_rows(t: &Tensor, rows: impl Fn(usize) -> bool) -> Tensor {
    let mut out = t.clone();
    let c = t.cols();
    for (r, chunk) in out.data_mut().chunks_mut(c).enumerate() {
        if rows(r) {
            chunk.fill(0.0);
        }
    }
    out
}

/// The masked fused frames for one utterance visit; reproducible from
/// `(seed, utterance id, step)`.
pub(crate) fn draw_masks(
    seed: u64,
    id: &str,
    step: usize,
    case: FusionCase,
    frames: usize,
    span: usize,
    prob: f64,
) -> (Vec<bool>, Vec<bool>) {
    let mut rng = rng_for(seed, &[0x3a5c, hash_str(id), step as u64]);
    let mut audio = span_mask(frames, span, prob, &mut rng);
    let mut video = span_mask(frames, span, prob, &mut rng);
    if case == FusionCase::VideoOnly {
        audio.fill(false);
    }
    if case == FusionCase::AudioOnly {
        video.fill(false);
    }
    if frames > 0 && !audio.iter().chain(&video).any(|&m| m) {
        let start = rng.random_range(0..frames);
        let target = if case == FusionCase::VideoOnly { &mut video } else { &mut audio };
        for m in &mut target[start..(start + span.max(1)).min(frames)] {
            *m = true;
        }
    }
    (audio, video)
}

/// Masked-prediction pretraining over every example of the train split
/// (targets are not used).
pub fn av_pretrain(init: &ModelParams, data: &Dataset, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let tc = &cfg.train;
    tc.validate()?;
    if cfg.n_clusters == 0 || cfg.span == 0 || !(0.0..=1.0).contains(&cfg.mask_prob) {
        return Err(Error::InvalidArgument("pretrain: clusters and span must be positive, mask_prob in [0, 1]".into()));
    }
    let set = data.split(Split::Train);
    if set.is_empty() {
        return Err(Error::Empty("pretraining split is empty"));
    }
    let r = stride(init);
    let mut points = Vec::new();
    for e in &set {
        let a = e
            .audio
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: no audio features", e.id)))?;
        for row in (0..a.rows()).step_by(r) {
            points.push(a.row(row).to_vec());
        }
    }
    if points.len() > MAX_CLUSTER_POINTS {
        let every = points.len().div_ceil(MAX_CLUSTER_POINTS);
        points = points.into_iter().step_by(every).collect();
    }
    let codebook = kmeans(&points, cfg.n_clusters, cfg.kmeans_iters, tc.seed)?;
    drop(points);
    let targets: Vec<Vec<usize>> = set.iter().map(|e| frame_targets(e, &codebook, r)).collect::<Result<_>>()?;

    let mut ext = init.clone();
    let d = init.config.dim;
    let k = codebook.k();
    let a = (6.0 / (d + k) as f64).sqrt();
    let mut rng = rng_for(tc.seed, &[0x4ead]);
    let w: Vec<f64> = (0..d * k).map(|_| rng.random_range(-a..a)).collect();
    let head_w = ext.store.push("pretrain.head.w", Tensor::matrix(d, k, w)?)?;
    let head_b = ext.store.push("pretrain.head.b", Tensor::zeros(vec![1, k]))?;

    let mode = tc.modality.train_mode(tc.modality_dropout);
    let mut adam = Adam::new(&ext.store, tc.beta1, tc.beta2, tc.eps);
    let mut metrics = Vec::with_capacity(tc.steps);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut order_rng = rng_for(tc.seed, &[0x0bde]);
    let mut cursor = order.len();

    for step in 1..=tc.steps {
        let lr = learning_rate(step, tc.steps, tc.lr, tc.warmup_frac);
        let mut grad = Gradient::zeros_like(&ext.store);
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut losses = Vec::with_capacity(batch.len());
        for (slot, &i) in batch.iter().enumerate() {
            let e = set[i];
            let case = mode.draw(&mut rng_for(tc.seed, &[0xca5e, step as u64, slot as u64]));
            let (audio, video) = inputs_for(e, case)?;
            let frames = match (audio, video) {
                (Some(a), Some(v)) => network::audio_branch_len(init, a.rows())?.min(v.rows()),
                (Some(a), None) => network::audio_branch_len(init, a.rows())?,
                (None, Some(v)) => v.rows(),
                (None, None) => unreachable!("a fusion case always keeps one stream"),
            }
            .min(targets[i].len());
            let (ma, mv) = draw_masks(tc.seed, &e.id, step, case, frames, cfg.span, cfg.mask_prob);
            let audio = audio.map(|t| zero_rows(t, |row| ma.get(row / r).copied().unwrap_or(false)));
            let video = video.map(|t| zero_rows(t, |row| mv.get(row).copied().unwrap_or(false)));
            let picked: Vec<usize> = (0..frames).filter(|&t| ma[t] || mv[t]).collect();
            let labels: Vec<usize> = picked.iter().map(|&t| targets[i][t]).collect();
            losses.push((audio, video, case, picked, labels));
        }
        let total_frames: usize = losses.iter().map(|l| l.3.len()).sum();
        let mut total = 0.0;
        for (audio, video, case, picked, labels) in &losses {
            let mut g = Graph::new(&ext.store);
            let x = network::fused_input(&mut g, &ext, audio.as_ref(), video.as_ref(), *case)?;
            let h = network::encoder(&mut g, &ext, x)?;
            let (hw, hb) = (g.param(head_w), g.param(head_b));
            let logits = g.linear(h, hw, Some(hb))?;
            let sel = g.select_rows(logits, picked)?;
            let mean = g.cross_entropy(sel, labels)?;
            let l = g.scale(mean, picked.len() as f64)?;
            total += g.scalar(l);
            g.backward_into(l, &mut grad, 1.0 / total_frames as f64)?;
        }
        let train_ce = total / total_frames as f64;
        if !train_ce.is_finite() {
            return Err(Error::Diverged { step });
        }
        adam.step(&mut ext.store, &grad, lr)?;
        metrics.push(MetricsRow {
            step,
            train_ce,
            valid_ce: None,
            lr,
        });
    }

    let named = ext
        .store
        .iter()
        .filter(|(n, _)| !n.starts_with("pretrain."))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    Ok(PretrainOutcome {
        params: ModelParams::from_named(&init.config, named)?,
        codebook,
        metrics,
    })
}
