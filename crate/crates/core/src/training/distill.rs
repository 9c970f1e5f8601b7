use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    None,
    /// Audio frontend, encoder and decoder come from the source; the adaptor
    /// and video frontend start fresh.
    AvFull,
    /// Only the decoder comes from the source.
    VDecoderOnly,
}

impl DistillMode {
    pub fn name(self) -> &'static str {
        match self {
            DistillMode::None => "none",
            DistillMode::AvFull => "av_full",
            DistillMode::VDecoderOnly => "v_decoder",
        }
    }

    fn groups(self) -> &'static [&'static str] {
        match self {
            DistillMode::None => &[],
            DistillMode::AvFull => &["audio_frontend.", "encoder.", "decoder."],
            DistillMode::VDecoderOnly => &["decoder."],
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DistillMode::None),
            "av_full" => Ok(DistillMode::AvFull),
            "v_decoder" | "v_decoder_only" => Ok(DistillMode::VDecoderOnly),
            _ => Err(Error::InvalidArgument(format!("unknown distillation plan {s:?} (none, av_full, v_decoder)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillPlan {
    pub mode: DistillMode,
    pub source: Option<PathBuf>,
}

impl DistillPlan {
    pub fn none() -> Self {
        DistillPlan {
            mode: DistillMode::None,
            source: None,
        }
    }

    pub fn new(mode: DistillMode, source: impl Into<PathBuf>) -> Self {
        DistillPlan {
            mode,
            source: Some(source.into()),
        }
    }

    /// Loads the source checkpoint and initializes from it.
    pub fn apply(&self, target: &ModelParams) -> Result<ModelParams> {
        match (self.mode, &self.source) {
            (DistillMode::None, _) => Ok(target.clone()),
            (_, None) => Err(Error::InvalidArgument(format!(
                "distillation plan {} needs a source checkpoint",
                self.mode
            ))),
            (mode, Some(path)) => distill_init(target, &load_checkpoint(path)?, mode),
        }
    }
}

/// Copies the plan's parameter groups from `source` into a copy of `target`;
/// every other tensor of `target` is left as it is.
pub fn distill_init(target: &ModelParams, source: &ModelParams, mode: DistillMode) -> Result<ModelParams> {
    let (t, s) = (&target.config, &source.config);
    if t.vocab != s.vocab || t.dim != s.dim || t.dec_layers != s.dec_layers || t.heads != s.heads || t.ffn_dim != s.ffn_dim {
        return Err(Error::Incompatible(format!(
            "decoder of the source (vocab {}, dim {}, {} layers) does not match the target (vocab {}, dim {}, {} layers)",
            s.vocab, s.dim, s.dec_layers, t.vocab, t.dim, t.dec_layers
        )));
    }
    if mode == DistillMode::AvFull {
        if !t.adaptor {
            return Err(Error::Incompatible("av_full transfer needs a target with a modality adaptor".into()));
        }
        if source.config.adaptor {
            return Err(Error::Incompatible("av_full source must not carry its own adaptor".into()));
        }
    }
    let mut out = target.clone();
    for prefix in mode.groups() {
        let ids = target.group(prefix);
        if ids.is_empty() || source.group(prefix).is_empty() {
            return Err(Error::Incompatible(format!("missing parameter group {prefix:?}")));
        }
        for id in ids {
            let name = target.store.name(id);
            let src = source
                .store
                .by_name(name)
                .ok_or_else(|| Error::Incompatible(format!("source lacks {name:?}")))?;
            if src.shape() != target.store.get(id).shape() {
                return Err(Error::Incompatible(format!(
                    "{name:?}: source shape {:?} vs target {:?}",
                    src.shape(),
                    target.store.get(id).shape()
                )));
            }
            *out.store.get_mut(id) = src.clone();
        }
    }
    Ok(out)
}
