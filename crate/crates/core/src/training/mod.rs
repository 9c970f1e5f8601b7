//! Cross-entropy training with Adam, masked-prediction pretraining and
//! cross-modal distillation from an audio-only teacher.

mod distill;
mod pretrain;

pub use distill::{distill_init, DistillMode, DistillPlan};
pub use pretrain::{av_pretrain, span_mask, PretrainConfig, PretrainOutcome};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::features::{audio_features, AudioFeatureConfig, Waveform};
use crate::model::{save_checkpoint, utterance_nll, FusionCase, FusionMode, ModelParams, UnitSequence};
use crate::noise::{mix_at_snr, synth_noise, NoiseCategory};
use crate::numerics::{log_softmax, Gradient, Graph, ParamSet, Tensor};
use crate::util::{atomic_write, rng_for};

/// Input modalities a model is trained or evaluated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    /// Both streams, with modality dropout during training.
    Av,
    A,
    V,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Av, Modality::A, Modality::V];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Av => "av",
            Modality::A => "a",
            Modality::V => "v",
        }
    }

    /// Fusion case used at inference and for validation.
    pub fn case(self) -> FusionCase {
        match self {
            Modality::Av => FusionCase::Both,
            Modality::A => FusionCase::AudioOnly,
            Modality::V => FusionCase::VideoOnly,
        }
    }

    pub fn train_mode(self, dropout: f64) -> FusionMode {
        match self {
            Modality::Av => FusionMode::TrainStochastic { p: dropout },
            Modality::A => FusionMode::ForceAudioOnly,
            Modality::V => FusionMode::ForceVideoOnly,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "av" => Ok(Modality::Av),
            "a" => Ok(Modality::A),
            "v" => Ok(Modality::V),
            _ => Err(Error::InvalidArgument(format!("unknown modality {s:?} (av, a, v)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Modality dropout probability for `Modality::Av`.
    pub modality_dropout: f64,
    pub modality: Modality,
    pub seed: u64,
    /// Steps between validation passes; the best one is kept.
    pub valid_every: usize,
    /// Probability of mixing noise into a training utterance's audio.
    pub noise_prob: f64,
    pub noise_snr_min: f64,
    pub noise_snr_max: f64,
    /// Where `best.ckpt`, `last.ckpt` and `metrics.csv` go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            warmup_frac: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            modality_dropout: 0.5,
            modality: Modality::Av,
            seed: 0,
            valid_every: 200,
            noise_prob: 0.0,
            noise_snr_min: -10.0,
            noise_snr_max: 10.0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 14] = [
        "steps",
        "batch_size",
        "lr",
        "warmup_frac",
        "beta1",
        "beta2",
        "eps",
        "modality_dropout",
        "modality",
        "seed",
        "valid_every",
        "noise_prob",
        "noise_snr_min",
        "noise_snr_max",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.steps == 0 || self.batch_size == 0 || self.valid_every == 0 {
            return bad("steps, batch_size and valid_every must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) || !(0.0..=1.0).contains(&self.noise_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.noise_snr_min <= self.noise_snr_max && self.noise_snr_min.is_finite() && self.noise_snr_max.is_finite()) {
            return bad("noise SNR range must be finite with min <= max");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup_frac" => self.warmup_frac = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "modality_dropout" => self.modality_dropout = parse(key, value)?,
            "modality" => self.modality = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "valid_every" => self.valid_every = parse(key, value)?,
            "noise_prob" => self.noise_prob = parse(key, value)?,
            "noise_snr_min" => self.noise_snr_min = parse(key, value)?,
            "noise_snr_max" => self.noise_snr_max = parse(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown train config key {key:?}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("modality_dropout", self.modality_dropout.to_string()),
            ("modality", self.modality.to_string()),
            ("seed", self.seed.to_string()),
            ("valid_every", self.valid_every.to_string()),
            ("noise_prob", self.noise_prob.to_string()),
            ("noise_snr_min", self.noise_snr_min.to_string()),
            ("noise_snr_max", self.noise_snr_max.to_string()),
        ]
    }
}

/// Inverse square-root schedule with linear warmup; `step` counts from 1.
pub fn learning_rate(step: usize, total: usize, peak: f64, warmup_frac: f64) -> f64 {
    let warmup = ((warmup_frac * total as f64).round() as usize).max(1);
    let s = step.max(1) as f64;
    if step <= warmup {
        peak * s / warmup as f64
    } else {
        peak * (warmup as f64 / s).sqrt()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &Gradient, lr: f64) -> Result<()> {
        if !grad.is_congruent(params) || self.m.len() != params.len() {
            return Err(Error::Shape("gradient does not match the parameter set".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in 0..params.len() {
            let g = grad.get(id).data();
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            params.apply_update(id, |w| {
                for i in 0..w.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    w[i] -= lr * mh / (vh.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

/// Mean negative log-likelihood per target symbol, eos included, of
/// teacher-forced logits with one row per step.
pub fn ce_loss(logits: &Tensor, target: &UnitSequence) -> Result<f64> {
    let steps = target.len() + 1;
    if logits.shape().len() != 2 || logits.rows() != steps {
        return Err(Error::Shape(format!(
            "{} logit rows for a target of {} units (expected {steps})",
            logits.shape().first().copied().unwrap_or(0),
            target.len()
        )));
    }
    let eos = logits.cols() - 1;
    target.check_vocab(eos)?;
    let mut total = 0.0;
    for (r, &y) in target.units().iter().chain(std::iter::once(&eos)).enumerate() {
        total -= log_softmax(logits.row(r))?[y];
    }
    Ok(total / steps as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_ce: f64,
    pub valid_ce: Option<f64>,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,train_ce,valid_ce,lr";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let valid = r.valid_ce.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{:.6},{},{:e}\n", r.step, r.train_ce, valid, r.lr));
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    atomic_write(path, metrics_csv(rows).as_bytes())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation pass (the last step without a valid split).
    pub params: ModelParams,
    pub last: ModelParams,
    pub metrics: Vec<MetricsRow>,
    pub best_step: usize,
    pub best_valid_ce: Option<f64>,
}

/// Source-side inputs of an example for a fusion case; absent streams are `None`.
pub(crate) fn inputs_for(e: &Example, case: FusionCase) -> Result<(Option<&Tensor>, Option<&Tensor>)> {
    let need_audio = case != FusionCase::VideoOnly;
    let need_video = case != FusionCase::AudioOnly;
    if need_audio && e.audio.is_none() {
        return Err(Error::InvalidArgument(format!("{}: no audio stream", e.id)));
    }
    if need_video && e.video.is_none() {
        return Err(Error::InvalidArgument(format!("{}: no video stream", e.id)));
    }
    Ok((
        if need_audio { e.audio.as_ref() } else { None },
        if need_video { e.video.as_ref() } else { None },
    ))
}

/// Token-weighted mean CE of a set of examples under a fixed fusion case.
pub fn mean_ce(params: &ModelParams, examples: &[&Example], case: FusionCase) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for e in examples {
        let (a, v) = inputs_for(e, case)?;
        let mut g = Graph::new(&params.store);
        let l = utterance_nll(&mut g, params, a, v, case, &e.target)?;
        total += g.scalar(l);
        tokens += e.target.len() + 1;
    }
    if tokens == 0 {
        return Err(Error::Empty("no examples to score"));
    }
    Ok(total / tokens as f64)
}

/// Clips of each noise category that augmentation crops from.
pub(crate) struct NoiseBank {
    clips: Vec<(NoiseCategory, Waveform)>,
}

impl NoiseBank {
    pub(crate) fn new(sample_rate: u32, seed: u64) -> Result<Self> {
        let clips = NoiseCategory::ALL
            .iter()
            .enumerate()
            .map(|(i, &c)| Ok((c, synth_noise(c, 8.0, sample_rate, rng_for(seed, &[0x401e, i as u64]).random())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(NoiseBank { clips })
    }

    /// Featurizes `wave` after mixing a random clip at a random SNR in `[lo, hi]`.
    pub(crate) fn noisy_features(
        &self,
        wave: &Waveform,
        cfg: &AudioFeatureConfig,
        lo: f64,
        hi: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let (_, clip) = &self.clips[rng.random_range(0..self.clips.len())];
        let snr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mixed = mix_at_snr(wave, clip, snr, rng.random())?;
        Ok(audio_features(&mixed, cfg)?.frames)
    }
}

fn save_if(dir: &Option<PathBuf>, name: &str, params: &ModelParams) -> Result<()> {
    match dir {
        Some(d) => save_checkpoint(&d.join(name), params),
        None => Ok(()),
    }
}

/// Trains on the dataset's train split, validating on its valid split.
/// A distillation plan other than `none` initializes from its source first.
pub fn train(init: &ModelParams, data: &Dataset, cfg: &TrainConfig, plan: &DistillPlan) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = data.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::Empty("training split is empty"));
    }
    let valid_set = data.split(Split::Valid);
    let mut params = plan.apply(init)?;
    if let Some(d) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let bank = if cfg.noise_prob > 0.0 {
        if train_set.iter().any(|e| e.waveform.is_none()) {
            return Err(Error::InvalidArgument("noise augmentation needs training waveforms".into()));
        }
        let sr = train_set[0].waveform.as_ref().map_or(16_000, |w| w.sample_rate);
        Some(NoiseBank::new(sr, cfg.seed)?)
    } else {
        None
    };

    let mode = cfg.modality.train_mode(cfg.modality_dropout);
    let case = cfg.modality.case();
    let mut adam = Adam::new(&params.store, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order_rng = rng_for(cfg.seed, &[0x7a11]);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for step in 1..=cfg.steps {
        let lr = learning_rate(step, cfg.steps, cfg.lr, cfg.warmup_frac);
        let mut grad = Gradient::zeros_like(&params.store);
        let mut total = 0.0;
        let mut tokens = 0usize;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let batch_tokens: usize = batch.iter().map(|&i| train_set[i].target.len() + 1).sum();
        let mut run = || -> Result<()> {
        for (slot, &i) in batch.iter().enumerate() {
            let e = train_set[i];
            let mut rng = rng_for(cfg.seed, &[step as u64, slot as u64]);
            let case = mode.draw(&mut rng);
            let (mut a, v) = inputs_for(e, case)?;
            let noisy;
            if let (Some(bank), Some(_)) = (&bank, a) {
                if rng.random::<f64>() < cfg.noise_prob {
                    let wave = e.waveform.as_ref().expect("checked above");
                    noisy = bank.noisy_features(wave, &data.audio, cfg.noise_snr_min, cfg.noise_snr_max, &mut rng)?;
                    a = Some(&noisy);
                }
            }
            let mut g = Graph::new(&params.store);
            let l = utterance_nll(&mut g, &params, a, v, case, &e.target)?;
            total += g.scalar(l);
            tokens += e.target.len() + 1;
            g.backward_into(l, &mut grad, 1.0 / batch_tokens as f64)?;
        }
        Ok(())
        };
        let outcome = run();
        let train_ce = total / tokens.max(1) as f64;
        let diverged = matches!(outcome, Err(Error::NonFinite(_)))
            || !train_ce.is_finite()
            || grad.tensors().iter().any(|t| t.data().iter().any(|x| !x.is_finite()));
        if !diverged {
            outcome?;
        }
        if diverged {
            save_if(&cfg.checkpoint_dir, "last.ckpt", &params)?;
            if let Some(d) = &cfg.checkpoint_dir {
                write_metrics(&d.join("metrics.csv"), &metrics)?;
            }
            return Err(Error::Diverged { step });
        }
        adam.step(&mut params.store, &grad, lr)?;

        let mut valid_ce = None;
        if (step % cfg.valid_every == 0 || step == cfg.steps) && !valid_set.is_empty() {
            let ce = mean_ce(&params, &valid_set, case)?;
            valid_ce = Some(ce);
            if best.as_ref().is_none_or(|b| ce < b.0) {
                save_if(&cfg.checkpoint_dir, "best.ckpt", &params)?;
                best = Some((ce, step, params.clone()));
            }
            save_if(&cfg.checkpoint_dir, "last.ckpt", &params)?;
        }
        metrics.push(MetricsRow {
            step,
            train_ce,
            valid_ce,
            lr,
        });
    }
    if let Some(d) = &cfg.checkpoint_dir {
        write_metrics(&d.join("metrics.csv"), &metrics)?;
        if best.is_none() {
            save_checkpoint(&d.join("best.ckpt"), &params)?;
            save_checkpoint(&d.join("last.ckpt"), &params)?;
        }
    }
    let (best_valid_ce, best_step, best_params) = match best {
        Some((ce, s, p)) => (Some(ce), s, p),
        None => (None, cfg.steps, params.clone()),
    };
    Ok(TrainOutcome {
        params: best_params,
        last: params,
        metrics,
        best_step,
        best_valid_ce,
    })
}

/// The speech-to-unit teacher: audio only, no video branch in use.
pub fn train_audio_teacher(init: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        modality: Modality::A,
        ..cfg.clone()
    };
    train(init, data, &cfg, &DistillPlan::none())
}
