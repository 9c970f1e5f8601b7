//! Unit-level BLEU and noisy-condition evaluation sweeps.

mod plot;
#[cfg(test)]
mod tests;

pub use plot::{curve_csvs, sweep_svg, write_plot};

use std::collections::HashMap;
use std::path::Path;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::features::{audio_features, AudioFeatureConfig, Waveform};
use crate::numerics::Tensor;
use crate::model::{beam_search, encode_source, ModelParams, UnitSequence};
use crate::noise::{mix_at_snr, synth_noise, MixSpec, NoiseCategory, DEFAULT_SNR_GRID};
use crate::training::{inputs_for, Modality};
use crate::units::reduce;
use crate::util::{atomic_write, derive_seed};

pub const BEAM: usize = 10;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in `[0, 100]` with clipped n-gram precisions and a brevity
/// penalty. Orders for which the hypotheses contain no n-grams at all are
/// left out of the geometric mean; any other zero precision gives 0.
pub fn bleu(hyps: &[UnitSequence], refs: &[UnitSequence], max_n: usize) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!("{} hypotheses vs {} references", hyps.len(), refs.len())));
    }
    if refs.is_empty() {
        return Err(Error::Empty("no references"));
    }
    if refs.iter().any(|r| r.is_empty()) {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be positive".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r.units(), n);
            for (g, c) in ngram_counts(h.units(), n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..max_n {
        if total[n] == 0 {
            continue;
        }
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * bp * (log_sum / orders as f64).exp()).clamp(0.0, 100.0))
}

/// Decoding settings shared by every evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub beam: usize,
    pub audio: AudioFeatureConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            beam: BEAM,
            audio: AudioFeatureConfig::default(),
        }
    }
}

/// Reduced beam-search hypothesis for one example, with audio replaced by
/// `noisy` features when given.
fn translate(params: &ModelParams, e: &Example, modality: Modality, noisy: Option<&Tensor>, beam: usize) -> Result<UnitSequence> {
    let case = modality.case();
    let (a, v) = inputs_for(e, case)?;
    let a = match (a, noisy) {
        (Some(_), Some(n)) => Some(n),
        (a, _) => a,
    };
    let x = encode_source(params, a, v, case)?;
    let y = beam_search(&x, params, beam, params.config.max_target_len)?;
    Ok(reduce(&y))
}

fn noise_clip(category: NoiseCategory, seed: u64, sample_rate: u32) -> Result<Waveform> {
    synth_noise(category, 10.0, sample_rate, derive_seed(seed, &[0xc11b, category as u64]))
}

fn mix_seed(spec: &MixSpec, index: usize) -> u64 {
    derive_seed(spec.seed, &[spec.category as u64, spec.snr_db.to_bits(), index as u64])
}

fn waveform_of(e: &Example) -> Result<&Waveform> {
    e.waveform
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: waveform needed for noisy evaluation", e.id)))
}

/// The exact waveform fed to the model for the `index`-th test utterance under `spec`.
pub fn mixed_waveform(e: &Example, spec: &MixSpec, index: usize) -> Result<Waveform> {
    let wave = waveform_of(e)?;
    let clip = noise_clip(spec.category, spec.seed, wave.sample_rate)?;
    mix_at_snr(wave, &clip, spec.snr_db, mix_seed(spec, index))
}

/// Unit BLEU of beam-search translations, optionally with noise mixed into
/// the audio. The noise realization depends on the mix spec and the
/// utterance position only, never on the modality.
pub fn evaluate(
    params: &ModelParams,
    examples: &[&Example],
    modality: Modality,
    mix: Option<&MixSpec>,
    settings: &EvalSettings,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("no test utterances"));
    }
    let clip = match mix {
        Some(m) if modality != Modality::V => {
            let sr = examples[0].waveform.as_ref().map_or(16_000, |w| w.sample_rate);
            Some(noise_clip(m.category, m.seed, sr)?)
        }
        _ => None,
    };
    let mut hyps = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let noisy = match (mix, &clip) {
            (Some(m), Some(c)) => {
                let mixed = mix_at_snr(waveform_of(e)?, c, m.snr_db, mix_seed(m, i))?;
                Some(audio_features(&mixed, &settings.audio)?.frames)
            }
            _ => None,
        };
        hyps.push(translate(params, e, modality, noisy.as_ref(), settings.beam)?);
        refs.push(reduce(&e.target));
    }
    bleu(&hyps, &refs, 4)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// `None` for the clean condition.
    pub category: Option<NoiseCategory>,
    pub snr_db: Option<f64>,
    pub modality: Modality,
    pub bleu: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_HEADER: &str = "category,snr_db,modality,bleu";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            let cat = r.category.map_or("none", |c| c.name());
            let snr = r.snr_db.map_or("clean".to_string(), |v| format!("{v}"));
            s.push_str(&format!("{cat},{snr},{},{:.4}\n", r.modality, r.bleu));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_csv().as_bytes())
    }

    pub fn parse_csv(text: &str) -> Result<SweepResult> {
        let bad = |line: usize, m: &str| Error::InvalidArgument(format!("sweep CSV line {line}: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(SWEEP_HEADER) {
            return Err(bad(1, "expected header category,snr_db,modality,bleu"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad(i + 2, "expected 4 columns"));
            }
            let category = match cols[0] {
                "none" => None,
                c => Some(c.parse().map_err(|_| bad(i + 2, "unknown category"))?),
            };
            let snr_db = match cols[1] {
                "clean" => None,
                v => Some(v.parse().map_err(|_| bad(i + 2, "bad snr"))?),
            };
            rows.push(SweepRow {
                category,
                snr_db,
                modality: cols[2].parse()?,
                bleu: cols[3].parse().map_err(|_| bad(i + 2, "bad bleu"))?,
            });
        }
        Ok(SweepResult { rows })
    }
}

/// Evaluation grid of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub categories: Vec<NoiseCategory>,
    pub snr_grid: Vec<f64>,
    pub modalities: Vec<Modality>,
    /// Also emit one clean row per modality.
    pub clean: bool,
    pub seed: u64,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            categories: NoiseCategory::ALL.to_vec(),
            snr_grid: DEFAULT_SNR_GRID.to_vec(),
            modalities: vec![Modality::Av, Modality::A],
            clean: false,
            seed: 0,
        }
    }
}

/// Every (category, SNR, modality) cell of the grid. Cells with the same
/// category and SNR see identical noise whatever the modality.
pub fn sweep_snr(params: &ModelParams, examples: &[&Example], grid: &SweepGrid, settings: &EvalSettings) -> Result<SweepResult> {
    if grid.modalities.is_empty() || (!grid.clean && (grid.categories.is_empty() || grid.snr_grid.is_empty())) {
        return Err(Error::Empty("sweep grid"));
    }
    let mut rows = Vec::new();
    if grid.clean {
        for &m in &grid.modalities {
            rows.push(SweepRow {
                category: None,
                snr_db: None,
                modality: m,
                bleu: evaluate(params, examples, m, None, settings)?,
            });
        }
    }
    for &c in &grid.categories {
        for &snr in &grid.snr_grid {
            let spec = MixSpec::new(c, snr, grid.seed)?;
            for &m in &grid.modalities {
                rows.push(SweepRow {
                    category: Some(c),
                    snr_db: Some(snr),
                    modality: m,
                    bleu: evaluate(params, examples, m, Some(&spec), settings)?,
                });
            }
        }
    }
    Ok(SweepResult { rows })
}
