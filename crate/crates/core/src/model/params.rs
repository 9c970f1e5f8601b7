use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};
use crate::util::rng_for;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ffn {
    pub norm: Norm,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvModule {
    pub norm: Norm,
    pub pw1: Linear,
    pub dw: Linear,
    pub dw_norm: Norm,
    pub pw2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayer {
    pub ffn1: Ffn,
    pub attn: Attn,
    pub conv: ConvModule,
    pub ffn2: Ffn,
    pub out_norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayer {
    pub self_attn: Attn,
    pub cross_attn: Attn,
    pub ffn: Ffn,
}

/// Parameter ids of every named tensor, derived deterministically from the config.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub audio: Linear,
    pub video_conv1: Linear,
    pub video_conv2: Linear,
    pub video_proj: Linear,
    pub adaptor: Option<Linear>,
    pub enc: Vec<EncLayer>,
    pub dec: Vec<DecLayer>,
    pub dec_norm: Norm,
    pub embed: usize,
    pub out: Linear,
}

/// Network weights plus the config they were built from.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamSet,
    pub(crate) layout: Layout,
}

enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Uniform(f64),
    Const(f64),
}

struct Builder<'a> {
    store: ParamSet,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let n = rows * cols;
        let data = match (&mut self.rng, init) {
            (_, Init::Const(c)) => vec![c; n],
            (None, _) => vec![0.0; n],
            (Some(rng), Init::Xavier { fan_in, fan_out }) => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            (Some(rng), Init::Uniform(a)) => (0..n).map(|_| rng.random_range(-a..a)).collect(),
        };
        let t = Tensor::matrix(rows, cols, data).expect("consistent shape");
        self.store.push(name, t).expect("layout names are unique")
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        let init = Init::Xavier { fan_in: inp, fan_out: out };
        Linear {
            w: self.tensor(format!("{name}.w"), inp, out, init),
            b: self.tensor(format!("{name}.b"), 1, out, Init::Const(0.0)),
        }
    }

    /// Conv kernel in `(width · in) × out` layout.
    fn conv(&mut self, name: &str, width: usize, inp: usize, out: usize) -> Linear {
        let init = Init::Xavier { fan_in: width * inp, fan_out: out };
        Linear {
            w: self.tensor(format!("{name}.w"), width * inp, out, init),
            b: self.tensor(format!("{name}.b"), 1, out, Init::Const(0.0)),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            g: self.tensor(format!("{name}.g"), 1, dim, Init::Const(1.0)),
            b: self.tensor(format!("{name}.b"), 1, dim, Init::Const(0.0)),
        }
    }

    fn attn(&mut self, name: &str, dim: usize) -> Attn {
        Attn {
            norm: self.norm(&format!("{name}.norm"), dim),
            q: self.linear(&format!("{name}.q"), dim, dim),
            k: self.linear(&format!("{name}.k"), dim, dim),
            v: self.linear(&format!("{name}.v"), dim, dim),
            o: self.linear(&format!("{name}.o"), dim, dim),
        }
    }

    fn ffn(&mut self, name: &str, dim: usize, hidden: usize) -> Ffn {
        Ffn {
            norm: self.norm(&format!("{name}.norm"), dim),
            up: self.linear(&format!("{name}.up"), dim, hidden),
            down: self.linear(&format!("{name}.down"), hidden, dim),
        }
    }
}

fn build(config: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (ParamSet, Layout) {
    let c = config;
    let d = c.dim;
    let mut b = Builder {
        store: ParamSet::new(),
        rng,
    };
    let audio = b.linear("audio_frontend.proj", c.audio_in(), d);
    let video_conv1 = b.conv("video_frontend.conv1", c.video_kernel, c.video_in, d);
    let video_conv2 = b.conv("video_frontend.conv2", c.video_kernel, d, d);
    let video_proj = b.linear("video_frontend.proj", d, d);
    let adaptor = c.adaptor.then(|| b.conv("adaptor.conv", c.adaptor_width, d, d));
    let enc = (0..c.enc_layers)
        .map(|i| {
            let p = format!("encoder.layers.{i}");
            EncLayer {
                ffn1: b.ffn(&format!("{p}.ffn1"), d, c.ffn_dim),
                attn: b.attn(&format!("{p}.attn"), d),
                conv: ConvModule {
                    norm: b.norm(&format!("{p}.conv.norm"), d),
                    pw1: b.linear(&format!("{p}.conv.pw1"), d, 2 * d),
                    dw: Linear {
                        w: b.tensor(
                            format!("{p}.conv.dw.w"),
                            c.conv_kernel,
                            d,
                            Init::Uniform(1.0 / (c.conv_kernel as f64).sqrt()),
                        ),
                        b: b.tensor(format!("{p}.conv.dw.b"), 1, d, Init::Const(0.0)),
                    },
                    dw_norm: b.norm(&format!("{p}.conv.dw_norm"), d),
                    pw2: b.linear(&format!("{p}.conv.pw2"), d, d),
                },
                ffn2: b.ffn(&format!("{p}.ffn2"), d, c.ffn_dim),
                out_norm: b.norm(&format!("{p}.out_norm"), d),
            }
        })
        .collect();
    let embed = b.tensor(
        "decoder.embed".into(),
        c.n_symbols(),
        d,
        Init::Uniform((3.0 / d as f64).sqrt()),
    );
    let dec = (0..c.dec_layers)
        .map(|i| {
            let p = format!("decoder.layers.{i}");
            DecLayer {
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, c.ffn_dim),
            }
        })
        .collect();
    let dec_norm = b.norm("decoder.final_norm", d);
    let out = b.linear("decoder.out", d, c.n_symbols());
    let layout = Layout {
        audio,
        video_conv1,
        video_conv2,
        video_proj,
        adaptor,
        enc,
        dec,
        dec_norm,
        embed,
        out,
    };
    (b.store, layout)
}

impl ModelParams {
    /// Randomly initialized parameters (Xavier-uniform weights, zero biases, unit norm gains).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x1417]);
        let (store, layout) = build(config, Some(&mut rng));
        Ok(ModelParams {
            config: config.clone(),
            store,
            layout,
        })
    }

    /// All weights zero except norm gains.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (store, layout) = build(config, None);
        Ok(ModelParams {
            config: config.clone(),
            store,
            layout,
        })
    }

    /// Rebuilds the layout for `config` and fills it from named tensors.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut p = ModelParams::zeros(config)?;
        if named.len() != p.store.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                p.store.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = p
                .store
                .id(&name)
                .ok_or_else(|| Error::Incompatible(format!("unexpected parameter {name:?}")))?;
            if p.store.get(id).shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name:?}: shape {:?} vs expected {:?}",
                    t.shape(),
                    p.store.get(id).shape()
                )));
            }
            *p.store.get_mut(id) = t;
        }
        Ok(p)
    }

    /// Ids of every tensor whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<usize> {
        (0..self.store.len()).filter(|&i| self.store.name(i).starts_with(prefix)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    pub(crate) fn t(&self, id: usize) -> &[f64] {
        self.store.get(id).data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::default();
        let a = ModelParams::init(&cfg, 1).unwrap();
        let b = ModelParams::init(&cfg, 1).unwrap();
        let c = ModelParams::init(&cfg, 2).unwrap();
        assert_eq!(a.store.tensors(), b.store.tensors());
        assert_ne!(a.store.tensors(), c.store.tensors());
    }

    #[test]
    fn groups_partition_the_parameters() {
        let cfg = ModelConfig {
            adaptor: true,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg, 0).unwrap();
        let total: usize = ["audio_frontend.", "video_frontend.", "adaptor.", "encoder.", "decoder."]
            .iter()
            .map(|g| p.group(g).len())
            .sum();
        assert_eq!(total, p.store.len());
        assert!(!p.group("adaptor.").is_empty());
        let no_adaptor = ModelParams::init(&ModelConfig::default(), 0).unwrap();
        assert!(no_adaptor.group("adaptor.").is_empty());
    }

    #[test]
    fn from_named_checks_names_and_shapes() {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            ffn_dim: 8,
            vocab: 4,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg, 3).unwrap();
        let named: Vec<_> = p.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let q = ModelParams::from_named(&cfg, named.clone()).unwrap();
        assert_eq!(q.store.tensors(), p.store.tensors());

        let mut bad = named.clone();
        bad[0].1 = Tensor::zeros(vec![1, 1]);
        assert!(matches!(ModelParams::from_named(&cfg, bad), Err(Error::Incompatible(_))));
        let mut renamed = named;
        renamed[0].0 = "nope".into();
        assert!(ModelParams::from_named(&cfg, renamed).is_err());
    }
}
