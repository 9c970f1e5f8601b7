//! Flat `section.key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use avts_core::data::{default_visemes, CorpusSpec, Scale};
use avts_core::features::AudioFeatureConfig;
use avts_core::model::{parse_kv, ModelConfig};
use avts_core::training::{PretrainConfig, TrainConfig};

use crate::UsageError;

const DATA_KEYS: [&str; 17] = [
    "preset",
    "seed",
    "teacher",
    "n_train",
    "n_valid",
    "n_test",
    "source_vocab",
    "k",
    "language_seed",
    "viseme_groups",
    "min_len",
    "max_len",
    "min_frames",
    "max_frames",
    "video_dim",
    "video_jitter",
    "audio_floor",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub hop_ms: f64,
    pub beam: usize,
    pub eval_seed: u64,
    pub units_k: usize,
    pub units_iters: usize,
    pub units_seed: u64,
    pub units_reduce: bool,
    /// `data.*` assignments, applied on top of the preset when the corpus spec is built.
    data: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut data = BTreeMap::new();
        data.insert("preset".into(), "tiny".into());
        data.insert("seed".into(), "0".into());
        data.insert("teacher".into(), "false".into());
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            hop_ms: AudioFeatureConfig::default().hop_ms,
            beam: avts_core::eval::BEAM,
            eval_seed: 0,
            units_k: 64,
            units_iters: 20,
            units_seed: 0,
            units_reduce: false,
            data,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .parse()
        .map_err(|_| UsageError(format!("config key {key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let (section, name) = key
            .split_once('.')
            .ok_or_else(|| UsageError(format!("config key {key:?} needs a section prefix such as train.")))?;
        let core = |e: avts_core::Error| UsageError(format!("config key {key}: {e}"));
        match section {
            "model" => self.model.set(name, value).map_err(core)?,
            "train" => self.train.set(name, value).map_err(core)?,
            "pretrain" => match name {
                "n_clusters" => self.pretrain.n_clusters = parse(key, value)?,
                "kmeans_iters" => self.pretrain.kmeans_iters = parse(key, value)?,
                "span" => self.pretrain.span = parse(key, value)?,
                "mask_prob" => self.pretrain.mask_prob = parse(key, value)?,
                _ => return Err(unknown(key)),
            },
            "features" => match name {
                "hop_ms" => self.hop_ms = parse(key, value)?,
                _ => return Err(unknown(key)),
            },
            "eval" => match name {
                "beam" => self.beam = parse(key, value)?,
                "seed" => self.eval_seed = parse(key, value)?,
                _ => return Err(unknown(key)),
            },
            "units" => match name {
                "k" => self.units_k = parse(key, value)?,
                "iters" => self.units_iters = parse(key, value)?,
                "seed" => self.units_seed = parse(key, value)?,
                "reduce" => self.units_reduce = parse(key, value)?,
                _ => return Err(unknown(key)),
            },
            "data" => {
                if !DATA_KEYS.contains(&name) {
                    return Err(unknown(key));
                }
                self.data.insert(name.to_string(), value.to_string());
                // parse eagerly so a bad value fails before any work
                self.corpus_spec()?;
            }
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    /// `key=value` assignment as given to `--set`.
    pub fn set_assignment(&mut self, text: &str) -> Result<(), UsageError> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects key=value, got {text:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let map = parse_kv(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        for (k, v) in &map {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec, UsageError> {
        let get = |k: &str| self.data.get(k).map(String::as_str);
        let scale: Scale = parse("data.preset", get("preset").unwrap_or("tiny"))?;
        let seed: u64 = parse("data.seed", get("seed").unwrap_or("0"))?;
        let teacher: bool = parse("data.teacher", get("teacher").unwrap_or("false"))?;
        let mut spec = if teacher {
            CorpusSpec {
                n_train: scale.train_utts(),
                ..CorpusSpec::teacher(seed)
            }
        } else {
            CorpusSpec::preset(scale, seed)
        };
        let mut groups = None;
        for (k, v) in &self.data {
            let key = format!("data.{k}");
            match k.as_str() {
                "preset" | "seed" | "teacher" => {}
                "n_train" => spec.n_train = parse(&key, v)?,
                "n_valid" => spec.n_valid = parse(&key, v)?,
                "n_test" => spec.n_test = parse(&key, v)?,
                "source_vocab" => spec.source_vocab = parse(&key, v)?,
                "k" => spec.k = parse(&key, v)?,
                "language_seed" => spec.language_seed = parse(&key, v)?,
                "viseme_groups" => groups = Some(parse::<usize>(&key, v)?),
                "min_len" => spec.min_len = parse(&key, v)?,
                "max_len" => spec.max_len = parse(&key, v)?,
                "min_frames" => spec.min_frames = parse(&key, v)?,
                "max_frames" => spec.max_frames = parse(&key, v)?,
                "video_dim" => spec.video_dim = parse(&key, v)?,
                "video_jitter" => spec.video_jitter = parse(&key, v)?,
                "audio_floor" => spec.audio_floor = parse(&key, v)?,
                _ => return Err(unknown(&key)),
            }
        }
        let groups = groups.unwrap_or_else(|| spec.n_viseme_groups());
        spec.viseme_groups = default_visemes(spec.source_vocab, groups, spec.language_seed);
        spec.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(spec)
    }

    pub fn audio_features(&self) -> AudioFeatureConfig {
        AudioFeatureConfig {
            n_mels: self.model.n_mels,
            hop_ms: self.hop_ms,
            stack: self.model.audio_stack,
        }
    }

    /// Every effective setting, one `section.key=value` line each, sorted by section.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        if let Ok(spec) = self.corpus_spec() {
            let get = |k: &str| self.data.get(k).cloned().unwrap_or_default();
            for (k, v) in [
                ("preset", get("preset")),
                ("seed", spec.seed.to_string()),
                ("teacher", spec.audio_only.to_string()),
                ("n_train", spec.n_train.to_string()),
                ("n_valid", spec.n_valid.to_string()),
                ("n_test", spec.n_test.to_string()),
                ("source_vocab", spec.source_vocab.to_string()),
                ("k", spec.k.to_string()),
                ("language_seed", spec.language_seed.to_string()),
                ("viseme_groups", spec.n_viseme_groups().to_string()),
                ("min_len", spec.min_len.to_string()),
                ("max_len", spec.max_len.to_string()),
                ("min_frames", spec.min_frames.to_string()),
                ("max_frames", spec.max_frames.to_string()),
                ("video_dim", spec.video_dim.to_string()),
                ("video_jitter", spec.video_jitter.to_string()),
                ("audio_floor", spec.audio_floor.to_string()),
            ] {
                writeln!(s, "data.{k}={v}").unwrap();
            }
        }
        writeln!(s, "eval.beam={}", self.beam).unwrap();
        writeln!(s, "eval.seed={}", self.eval_seed).unwrap();
        writeln!(s, "features.hop_ms={}", self.hop_ms).unwrap();
        for line in self.model.to_kv().lines() {
            writeln!(s, "model.{line}").unwrap();
        }
        let p = &self.pretrain;
        writeln!(s, "pretrain.kmeans_iters={}", p.kmeans_iters).unwrap();
        writeln!(s, "pretrain.mask_prob={}", p.mask_prob).unwrap();
        writeln!(s, "pretrain.n_clusters={}", p.n_clusters).unwrap();
        writeln!(s, "pretrain.span={}", p.span).unwrap();
        for (k, v) in self.train.entries() {
            writeln!(s, "train.{k}={v}").unwrap();
        }
        writeln!(s, "units.iters={}", self.units_iters).unwrap();
        writeln!(s, "units.k={}", self.units_k).unwrap();
        writeln!(s, "units.reduce={}", self.units_reduce).unwrap();
        writeln!(s, "units.seed={}", self.units_seed).unwrap();
        s
    }
}

fn unknown(key: &str) -> UsageError {
    UsageError(format!("unknown config key {key:?}"))
}
