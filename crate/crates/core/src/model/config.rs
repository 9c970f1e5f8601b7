use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// The defaults are the desk-scale configuration; the large published
/// configuration (24/12 layers, dim 1024, 16 heads, 4096 FFN, 1000 units)
/// is expressible with the same fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_mels: usize,
    /// Log-mel frames stacked into one audio frame.
    pub audio_stack: usize,
    /// Width of the lip-ROI stand-in vectors.
    pub video_in: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Depthwise kernel of the conformer convolution module (odd).
    pub conv_kernel: usize,
    /// Temporal kernel of the video frontend convolutions (odd).
    pub video_kernel: usize,
    /// Unit vocabulary size K; the decoder predicts K units plus eos.
    pub vocab: usize,
    pub max_target_len: usize,
    pub adaptor: bool,
    pub adaptor_width: usize,
    pub adaptor_stride: usize,
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_mels: 80,
            audio_stack: 4,
            video_in: 16,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            conv_kernel: 5,
            video_kernel: 3,
            vocab: 64,
            max_target_len: 64,
            adaptor: false,
            adaptor_width: 3,
            adaptor_stride: 2,
            positional: true,
        }
    }
}

impl ModelConfig {
    pub fn audio_in(&self) -> usize {
        self.n_mels * self.audio_stack
    }

    /// Output symbols: K units plus eos.
    pub fn n_symbols(&self) -> usize {
        self.vocab + 1
    }

    pub fn eos(&self) -> usize {
        self.vocab
    }

    /// Decoder input id standing for bos.
    pub fn bos(&self) -> usize {
        self.vocab
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.vocab < 2 {
            return bad("vocab must be at least 2");
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("dim must be a positive multiple of heads");
        }
        if self.conv_kernel.is_multiple_of(2) || self.video_kernel.is_multiple_of(2) {
            return bad("conv_kernel and video_kernel must be odd");
        }
        if self.n_mels == 0 || self.audio_stack == 0 || self.video_in == 0 || self.ffn_dim == 0 {
            return bad("feature and ffn sizes must be positive");
        }
        if self.max_target_len == 0 {
            return bad("max_target_len must be positive");
        }
        if self.adaptor && (self.adaptor_width == 0 || self.adaptor_stride == 0) {
            return bad("adaptor width and stride must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_mels", self.n_mels.to_string()),
            ("audio_stack", self.audio_stack.to_string()),
            ("video_in", self.video_in.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("dec_layers", self.dec_layers.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("video_kernel", self.video_kernel.to_string()),
            ("vocab", self.vocab.to_string()),
            ("max_target_len", self.max_target_len.to_string()),
            ("adaptor", self.adaptor.to_string()),
            ("adaptor_width", self.adaptor_width.to_string()),
            ("adaptor_stride", self.adaptor_stride.to_string()),
            ("positional", self.positional.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 16] = [
        "n_mels",
        "audio_stack",
        "video_in",
        "dim",
        "heads",
        "ffn_dim",
        "enc_layers",
        "dec_layers",
        "conv_kernel",
        "video_kernel",
        "vocab",
        "max_target_len",
        "adaptor",
        "adaptor_width",
        "adaptor_stride",
        "positional",
    ];

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}: expected an integer, got {value:?}")))
        };
        let flag = || -> Result<bool> {
            value
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}: expected true/false, got {value:?}")))
        };
        match key {
            "n_mels" => self.n_mels = num()?,
            "audio_stack" => self.audio_stack = num()?,
            "video_in" => self.video_in = num()?,
            "dim" => self.dim = num()?,
            "heads" => self.heads = num()?,
            "ffn_dim" => self.ffn_dim = num()?,
            "enc_layers" => self.enc_layers = num()?,
            "dec_layers" => self.dec_layers = num()?,
            "conv_kernel" => self.conv_kernel = num()?,
            "video_kernel" => self.video_kernel = num()?,
            "vocab" => self.vocab = num()?,
            "max_target_len" => self.max_target_len = num()?,
            "adaptor" => self.adaptor = flag()?,
            "adaptor_width" => self.adaptor_width = num()?,
            "adaptor_stride" => self.adaptor_stride = num()?,
            "positional" => self.positional = flag()?,
            _ => return Err(Error::InvalidArgument(format!("unknown model config key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let mut cfg = ModelConfig::default();
        for (k, v) in &map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::InvalidArgument(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(map)
}
