//! Graph construction for every block of the network.

use super::fusion::FusionCase;
use super::params::{Attn, Ffn, Linear, ModelParams, Norm};
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, Graph, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

fn lin(g: &mut Graph, l: Linear, x: Var) -> Result<Var> {
    let w = g.param(l.w);
    let b = g.param(l.b);
    g.linear(x, w, Some(b))
}

fn conv(g: &mut Graph, l: Linear, x: Var, width: usize, stride: usize) -> Result<Var> {
    let w = g.param(l.w);
    let b = g.param(l.b);
    g.conv1d(x, w, Some(b), width, stride)
}

fn norm(g: &mut Graph, n: Norm, x: Var) -> Result<Var> {
    let gain = g.param(n.g);
    let bias = g.param(n.b);
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Pre-normed multi-head attention; `memory` of `None` means self-attention.
fn attention(g: &mut Graph, a: &Attn, x: Var, memory: Option<Var>, heads: usize, mask: &AttnMask) -> Result<Var> {
    let h = norm(g, a.norm, x)?;
    let kv = memory.unwrap_or(h);
    let q = lin(g, a.q, h)?;
    let k = lin(g, a.k, kv)?;
    let v = lin(g, a.v, kv)?;
    let o = g.attention(q, k, v, heads, mask)?;
    lin(g, a.o, o)
}

fn feed_forward(g: &mut Graph, f: &Ffn, x: Var) -> Result<Var> {
    let h = norm(g, f.norm, x)?;
    let h = lin(g, f.up, h)?;
    let h = g.swish(h)?;
    lin(g, f.down, h)
}

/// Sinusoidal encoding of position `pos` written into `out`.
pub(crate) fn positional_row(pos: usize, out: &mut [f64]) {
    let d = out.len();
    for (i, o) in out.iter_mut().enumerate() {
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
        let a = pos as f64 * freq;
        *o = if i % 2 == 0 { a.sin() } else { a.cos() };
    }
}

/// Sinusoidal absolute position table, `t × d`.
pub(crate) fn positional_table(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for (pos, row) in data.chunks_exact_mut(d.max(1)).enumerate() {
        positional_row(pos, row);
    }
    Tensor::matrix(t, d, data).expect("consistent shape")
}

pub(crate) fn audio_frontend(g: &mut Graph, p: &ModelParams, x: Var) -> Result<Var> {
    let din = g.value(x).cols();
    if din != p.config.audio_in() {
        return Err(Error::Shape(format!(
            "audio frontend expects {} input dims, got {din}",
            p.config.audio_in()
        )));
    }
    lin(g, p.layout.audio, x)
}

/// Two same-length temporal convolutions with swish, then a projection.
pub(crate) fn video_frontend(g: &mut Graph, p: &ModelParams, x: Var) -> Result<Var> {
    let din = g.value(x).cols();
    if din != p.config.video_in {
        return Err(Error::Shape(format!(
            "video frontend expects {} input dims, got {din}",
            p.config.video_in
        )));
    }
    let k = p.config.video_kernel;
    let mut h = x;
    for l in [p.layout.video_conv1, p.layout.video_conv2] {
        let padded = g.pad_rows(h, k / 2, k / 2)?;
        let c = conv(g, l, padded, k, 1)?;
        h = g.swish(c)?;
    }
    lin(g, p.layout.video_proj, h)
}

pub(crate) fn adaptor(g: &mut Graph, p: &ModelParams, x: Var) -> Result<Var> {
    let l = p
        .layout
        .adaptor
        .ok_or_else(|| Error::InvalidArgument("adaptor is disabled in this model config".into()))?;
    conv(g, l, x, p.config.adaptor_width, p.config.adaptor_stride)
}

/// Frame count leaving the audio branch for `t` stacked input frames.
pub(crate) fn audio_branch_len(p: &ModelParams, t: usize) -> Result<usize> {
    if !p.config.adaptor {
        return Ok(t);
    }
    let (w, s) = (p.config.adaptor_width, p.config.adaptor_stride);
    if t < w {
        return Err(Error::Shape(format!("{t} audio frames shorter than adaptor width {w}")));
    }
    Ok((t - w) / s + 1)
}

/// Frontends, optional adaptor and fusion. A modality masked by `case` is
/// never computed, so its parameters receive exactly zero gradient.
pub(crate) fn fused_input(
    g: &mut Graph,
    p: &ModelParams,
    audio: Option<&Tensor>,
    video: Option<&Tensor>,
    case: FusionCase,
) -> Result<Var> {
    let ta = audio.map(|a| audio_branch_len(p, a.rows())).transpose()?;
    let tv = video.map(|v| v.rows());
    let t = match (ta, tv) {
        (Some(a), Some(v)) => a.min(v),
        (Some(a), None) => a,
        (None, Some(v)) => v,
        (None, None) => return Err(Error::InvalidArgument("fusion needs at least one modality".into())),
    };
    let use_audio = audio.filter(|_| case != FusionCase::VideoOnly);
    let use_video = video.filter(|_| case != FusionCase::AudioOnly);
    let mut parts = Vec::new();
    if let Some(a) = use_audio {
        let x = g.input(a.clone())?;
        let mut h = audio_frontend(g, p, x)?;
        if p.config.adaptor {
            h = adaptor(g, p, h)?;
        }
        parts.push(truncate(g, h, t)?);
    }
    if let Some(v) = use_video {
        let x = g.input(v.clone())?;
        let h = video_frontend(g, p, x)?;
        parts.push(truncate(g, h, t)?);
    }
    match parts[..] {
        [] => g.input(Tensor::zeros(vec![t, p.config.dim])),
        [one] => Ok(one),
        [a, v] => g.add(a, v),
        _ => unreachable!(),
    }
}

fn truncate(g: &mut Graph, x: Var, t: usize) -> Result<Var> {
    if g.value(x).rows() == t {
        Ok(x)
    } else {
        g.slice_rows(x, 0, t)
    }
}

pub(crate) fn encoder(g: &mut Graph, p: &ModelParams, x: Var) -> Result<Var> {
    let (t, d) = (g.value(x).rows(), g.value(x).cols());
    if d != p.config.dim {
        return Err(Error::Shape(format!("encoder expects dim {}, got {d}", p.config.dim)));
    }
    let mut x = x;
    if p.config.positional {
        let pe = g.input(positional_table(t, d))?;
        x = g.add(x, pe)?;
    }
    let heads = p.config.heads;
    for layer in &p.layout.enc {
        let f = feed_forward(g, &layer.ffn1, x)?;
        let f = g.scale(f, 0.5)?;
        x = g.add(x, f)?;

        let a = attention(g, &layer.attn, x, None, heads, &AttnMask::None)?;
        x = g.add(x, a)?;

        let cm = &layer.conv;
        let h = norm(g, cm.norm, x)?;
        let h = lin(g, cm.pw1, h)?;
        let h = g.glu(h)?;
        let (dw, db) = (g.param(cm.dw.w), g.param(cm.dw.b));
        let h = g.depthwise_conv(h, dw, db)?;
        let h = norm(g, cm.dw_norm, h)?;
        let h = g.swish(h)?;
        let h = lin(g, cm.pw2, h)?;
        x = g.add(x, h)?;

        let f = feed_forward(g, &layer.ffn2, x)?;
        let f = g.scale(f, 0.5)?;
        x = g.add(x, f)?;
        x = norm(g, layer.out_norm, x)?;
    }
    Ok(x)
}

/// Teacher-forced decoder: `inputs` starts with bos; returns `len × (K+1)` logits.
pub(crate) fn decoder_logits(g: &mut Graph, p: &ModelParams, memory: Var, inputs: &[usize]) -> Result<Var> {
    let d = p.config.dim;
    if g.value(memory).cols() != d {
        return Err(Error::Shape(format!(
            "memory dim {} vs model dim {d}",
            g.value(memory).cols()
        )));
    }
    let table = g.param(p.layout.embed);
    let e = g.embedding(table, inputs)?;
    let mut x = g.scale(e, (d as f64).sqrt())?;
    if p.config.positional {
        let pe = g.input(positional_table(inputs.len(), d))?;
        x = g.add(x, pe)?;
    }
    let heads = p.config.heads;
    for layer in &p.layout.dec {
        let a = attention(g, &layer.self_attn, x, None, heads, &AttnMask::Causal)?;
        x = g.add(x, a)?;
        let c = attention(g, &layer.cross_attn, x, Some(memory), heads, &AttnMask::None)?;
        x = g.add(x, c)?;
        let f = feed_forward(g, &layer.ffn, x)?;
        x = g.add(x, f)?;
    }
    let x = norm(g, p.layout.dec_norm, x)?;
    lin(g, p.layout.out, x)
}
