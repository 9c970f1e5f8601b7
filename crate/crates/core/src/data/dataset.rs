use std::path::{Path, PathBuf};

use super::manifest::{resolve, ManifestRecord};
use super::{load_manifest, write_manifest, Corpus, Split};
use crate::error::{Error, Result};
use crate::features::{audio_features, read_avtf, write_avtf, AudioFeatureConfig, AvtfRecord, Modality, Waveform, VIDEO_RATE_HZ};
use crate::model::UnitSequence;
use crate::numerics::Tensor;
use crate::units::{read_units, write_units};

/// What to keep when turning utterances into model inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureSettings {
    pub audio: AudioFeatureConfig,
    /// Drop video even when present.
    pub audio_only: bool,
    /// Keep waveforms of validation and test utterances for noisy evaluation.
    pub keep_eval_waveforms: bool,
    /// Keep training waveforms too, for noise augmentation.
    pub keep_train_waveforms: bool,
}

impl FeatureSettings {
    fn keeps(&self, split: Split) -> bool {
        match split {
            Split::Train => self.keep_train_waveforms,
            _ => self.keep_eval_waveforms,
        }
    }
}

impl Default for FeatureSettings {
    fn default() -> Self {
        FeatureSettings {
            audio: AudioFeatureConfig::default(),
            audio_only: false,
            keep_eval_waveforms: true,
            keep_train_waveforms: false,
        }
    }
}

/// One utterance as the model sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub split: Split,
    /// Normalized, stacked log-mel frames.
    pub audio: Option<Tensor>,
    pub video: Option<Tensor>,
    pub target: UnitSequence,
    pub waveform: Option<Waveform>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub audio: AudioFeatureConfig,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus, settings: &FeatureSettings) -> Result<Self> {
        let examples = corpus
            .utterances
            .iter()
            .map(|u| {
                let keep = settings.keeps(u.split);
                Ok(Example {
                    id: u.id.clone(),
                    split: u.split,
                    audio: Some(audio_features(&u.audio, &settings.audio)?.frames),
                    video: if settings.audio_only {
                        None
                    } else {
                        u.video.as_ref().map(|v| v.frames.clone())
                    },
                    target: u.target.clone(),
                    waveform: keep.then(|| u.audio.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            examples,
            audio: settings.audio,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn load_example(manifest: &Path, rec: &ManifestRecord, settings: &FeatureSettings) -> Result<Example> {
    let audio_path = resolve(manifest, &rec.audio_path);
    let arec = read_avtf(&audio_path)?;
    let keep = settings.keeps(rec.split);
    let (audio, waveform) = if arec.cols == 1 {
        let wave = arec.to_waveform()?;
        (audio_features(&wave, &settings.audio)?.frames, keep.then_some(wave))
    } else {
        let fs = arec.to_stream(Modality::Audio)?;
        if fs.dim() != settings.audio.n_mels * settings.audio.stack {
            return Err(Error::format(
                &audio_path,
                format!("feature dim {} does not match the configured audio pipeline", fs.dim()),
            ));
        }
        (fs.frames, None)
    };
    let video = match (&rec.video_path, settings.audio_only) {
        (Some(v), false) => {
            let p = resolve(manifest, v);
            let fs = read_avtf(&p)?.to_stream(Modality::Video)?;
            if (fs.frame_rate_hz - VIDEO_RATE_HZ).abs() > 1e-9 {
                return Err(Error::format(&p, format!("video rate {} Hz, expected {VIDEO_RATE_HZ}", fs.frame_rate_hz)));
            }
            Some(fs.frames)
        }
        _ => None,
    };
    let units_path = resolve(manifest, &rec.units_path);
    let target = read_units(&units_path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::format(&units_path, "no unit line"))?;
    Ok(Example {
        id: rec.id.clone(),
        split: rec.split,
        audio: Some(audio),
        video,
        target,
        waveform,
    })
}

/// Loads every utterance of a manifest. Audio entries may be raw waveforms
/// (one column), which are featurized here, or precomputed feature files.
pub fn load_dataset(manifest: &Path, settings: &FeatureSettings) -> Result<Dataset> {
    let records = load_manifest(manifest)?;
    let examples = records
        .iter()
        .map(|r| load_example(manifest, r, settings))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        examples,
        audio: settings.audio,
    })
}

/// Writes waveforms, lip features and unit files under `dir` plus `dir/manifest.tsv`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let audio_rel = format!("audio/{}.avtf", u.id);
        write_avtf(&dir.join(&audio_rel), &AvtfRecord::from_waveform(&u.audio))?;
        let video_rel = match &u.video {
            Some(v) => {
                let rel = format!("video/{}.avtf", u.id);
                write_avtf(&dir.join(&rel), &AvtfRecord::from_stream(v))?;
                Some(rel)
            }
            None => None,
        };
        let units_rel = format!("units/{}.units", u.id);
        write_units(&dir.join(&units_rel), std::slice::from_ref(&u.target))?;
        records.push(ManifestRecord {
            id: u.id.clone(),
            audio_path: audio_rel,
            video_path: video_rel,
            units_path: units_rel,
            split: u.split,
        });
    }
    let path = dir.join("manifest.tsv");
    write_manifest(&records, &path)?;
    Ok(path)
}
