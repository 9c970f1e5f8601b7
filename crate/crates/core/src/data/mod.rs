//! Synthetic parallel audio-visual translation corpus.
//!
//! A seeded toy language supplies source symbol sequences (bigram grammar)
//! and a deterministic translation into target units. Each source symbol
//! sounds distinct in the audio, while the video only shows its viseme
//! group, so lip features alone are ambiguous.

mod dataset;
mod language;
mod manifest;

pub use dataset::{load_dataset, write_corpus, Dataset, Example, FeatureSettings};
pub use language::Language;
pub use manifest::{load_manifest, resolve, write_manifest, ManifestRecord, MANIFEST_HEADER};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{FeatureStream, Modality, Waveform, VIDEO_RATE_HZ};
use crate::model::UnitSequence;
use crate::numerics::Tensor;
use crate::util::rng_for;

pub const SAMPLE_RATE: u32 = 16_000;
/// Waveform samples per 25 Hz video frame.
pub const SAMPLES_PER_FRAME: usize = 640;
/// Extra samples so the last 25 ms analysis window fits: exactly four 10 ms hops per video frame.
pub const TAIL_SAMPLES: usize = 240;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// Training-set scale presets mirroring the 200/30/10-hour subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Normal,
    Small,
    Tiny,
}

impl Scale {
    pub fn train_utts(self) -> usize {
        match self {
            Scale::Normal => 2000,
            Scale::Small => 300,
            Scale::Tiny => 100,
        }
    }

    pub fn hours_tag(self) -> &'static str {
        match self {
            Scale::Normal => "200h",
            Scale::Small => "30h",
            Scale::Tiny => "10h",
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(Scale::Normal),
            "small" => Ok(Scale::Small),
            "tiny" => Ok(Scale::Tiny),
            _ => Err(Error::InvalidArgument(format!("unknown scale {s:?} (normal, small, tiny)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub source_vocab: usize,
    /// Target unit vocabulary size K.
    pub k: usize,
    /// Seeds the utterance draws.
    pub seed: u64,
    /// Seeds the language itself (grammar, translation, sounds, visemes),
    /// so corpora with different `seed` share one language.
    pub language_seed: u64,
    /// Viseme group of each source symbol.
    pub viseme_groups: Vec<usize>,
    pub hours_tag: String,
    pub min_len: usize,
    pub max_len: usize,
    /// Inclusive range of video frames per spoken symbol.
    pub min_frames: usize,
    pub max_frames: usize,
    pub video_dim: usize,
    /// Standard deviation of per-frame jitter on the lip features.
    pub video_jitter: f64,
    /// Standard deviation of the white floor under the audio.
    pub audio_floor: f64,
    /// Teacher corpora carry no video.
    pub audio_only: bool,
}

/// Default viseme map: `groups` classes of consecutive symbols after a seeded shuffle.
pub fn default_visemes(vocab: usize, groups: usize, language_seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..vocab).collect();
    order.shuffle(&mut rng_for(language_seed, &[0x7153]));
    let mut map = vec![0; vocab];
    for (rank, &sym) in order.iter().enumerate() {
        map[sym] = rank % groups.max(1);
    }
    map
}

impl CorpusSpec {
    pub fn preset(scale: Scale, seed: u64) -> Self {
        let language_seed = 2024;
        CorpusSpec {
            n_train: scale.train_utts(),
            n_valid: 100,
            n_test: 200,
            source_vocab: 12,
            k: 64,
            seed,
            language_seed,
            viseme_groups: default_visemes(12, 4, language_seed),
            hours_tag: scale.hours_tag().into(),
            min_len: 3,
            max_len: 6,
            min_frames: 2,
            max_frames: 4,
            video_dim: 16,
            video_jitter: 0.4,
            audio_floor: 0.01,
            audio_only: false,
        }
    }

    /// Audio-only corpus in the same language, for the speech-to-unit teacher.
    pub fn teacher(seed: u64) -> Self {
        CorpusSpec {
            audio_only: true,
            hours_tag: "audio-only".into(),
            ..CorpusSpec::preset(Scale::Normal, seed)
        }
    }

    pub fn n_viseme_groups(&self) -> usize {
        self.viseme_groups.iter().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("corpus spec: {m}")));
        if self.source_vocab < 2 {
            return bad("source vocabulary needs at least 2 symbols".into());
        }
        if self.k < 2 {
            return bad("unit vocabulary K must be at least 2".into());
        }
        if self.k * (self.k - 1) < self.source_vocab {
            return bad(format!("K={} cannot give {} distinct unit pairs", self.k, self.source_vocab));
        }
        if self.viseme_groups.len() != self.source_vocab {
            return bad(format!(
                "viseme map covers {} symbols, vocabulary has {}",
                self.viseme_groups.len(),
                self.source_vocab
            ));
        }
        let g = self.n_viseme_groups();
        if (0..g).any(|grp| !self.viseme_groups.contains(&grp)) {
            return bad("viseme group ids must be contiguous from 0".into());
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return bad("sentence lengths must satisfy 1 <= min_len <= max_len".into());
        }
        if self.min_frames == 0 || self.max_frames < self.min_frames {
            return bad("frames per symbol must satisfy 1 <= min_frames <= max_frames".into());
        }
        if self.video_dim == 0 {
            return bad("video_dim must be positive".into());
        }
        if !(self.video_jitter >= 0.0 && self.audio_floor >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if self.n_train + self.n_valid + self.n_test == 0 {
            return bad("corpus would be empty".into());
        }
        Ok(())
    }

    pub fn language(&self) -> Language {
        Language::new(self)
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Valid => self.n_valid,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    pub source: Vec<usize>,
    pub audio: Waveform,
    pub video: Option<FeatureStream>,
    pub target: UnitSequence,
    /// Source symbol spoken in each video frame, `None` for silence.
    pub frame_symbols: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// An utterance's waveform, lip features and per-frame alignment.
pub type Rendered = (Waveform, Option<FeatureStream>, Vec<Option<usize>>);

/// Renders one utterance. Values are rounded through `f32` so that writing
/// them to AVTF files and reading them back is lossless.
pub fn render(lang: &Language, spec: &CorpusSpec, source: &[usize], rng: &mut impl Rng) -> Rendered {
    let durations: Vec<usize> = source.iter().map(|_| rng.random_range(spec.min_frames..=spec.max_frames)).collect();
    // one silent frame either side
    let t_v = durations.iter().sum::<usize>() + 2;
    let n = t_v * SAMPLES_PER_FRAME + TAIL_SAMPLES;
    let sr = SAMPLE_RATE as f64;
    let pitch = rng.random_range(0.96..1.04);
    let loud = rng.random_range(0.7..1.0);
    let floor = Normal::new(0.0, spec.audio_floor.max(1e-12)).expect("valid sigma");
    let mut samples: Vec<f64> = (0..n).map(|_| floor.sample(rng)).collect();
    let ramp = (0.005 * sr) as usize;
    let mut frame = 1;
    for (&sym, &dur) in source.iter().zip(&durations) {
        let start = frame * SAMPLES_PER_FRAME;
        let len = dur * SAMPLES_PER_FRAME;
        let phases: Vec<f64> = lang.sounds[sym].iter().map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        for i in 0..len {
            let t = i as f64 / sr;
            let edge = i.min(len - 1 - i);
            let env = if edge < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let s: f64 = lang.sounds[sym]
                .iter()
                .zip(&phases)
                .map(|(&(f, a), ph)| a * (std::f64::consts::TAU * f * pitch * t + ph).sin())
                .sum();
            samples[start + i] += loud * env * s;
        }
        frame += dur;
    }
    let samples = samples.into_iter().map(round_f32).collect();
    let audio = Waveform::new(samples, SAMPLE_RATE).expect("finite synthesis");

    let mut frame_symbols = vec![None];
    for (&sym, &dur) in source.iter().zip(&durations) {
        frame_symbols.extend(std::iter::repeat_n(Some(sym), dur));
    }
    frame_symbols.push(None);

    let video = (!spec.audio_only).then(|| {
        let jitter = Normal::new(0.0, spec.video_jitter.max(1e-12)).expect("valid sigma");
        let mut data = Vec::with_capacity(t_v * spec.video_dim);
        for s in &frame_symbols {
            for c in 0..spec.video_dim {
                let base = s.map_or(0.0, |s| lang.visemes[spec.viseme_groups[s]][c]);
                data.push(round_f32(base + jitter.sample(rng)));
            }
        }
        let t = Tensor::matrix(t_v, spec.video_dim, data).expect("consistent shape");
        FeatureStream::new(t, VIDEO_RATE_HZ, Modality::Video).expect("non-empty video")
    });
    (audio, video, frame_symbols)
}

/// Draws the whole corpus; every utterance has its own seeded stream.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let lang = spec.language();
    let mut utterances = Vec::with_capacity(spec.n_train + spec.n_valid + spec.n_test);
    for split in Split::ALL {
        for i in 0..spec.split_size(split) {
            let mut rng = rng_for(spec.seed, &[split as u64 + 1, i as u64]);
            let source = lang.sample_sentence(spec, &mut rng);
            let (audio, video, frame_symbols) = render(&lang, spec, &source, &mut rng);
            utterances.push(Utterance {
                id: format!("{}-{:05}", split.name(), i),
                split,
                target: lang.translate(&source),
                source,
                audio,
                video,
                frame_symbols,
            });
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        utterances,
    })
}
