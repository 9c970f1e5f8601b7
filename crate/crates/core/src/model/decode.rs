//! Autoregressive scoring and search over unit sequences.
//!
//! `decode_step` and `score_sequence` run the full teacher-forced graph.
//! Search uses a cached decoder that advances all hypotheses one token at a
//! time, reusing their self-attention keys and values.

use std::cmp::Ordering;

use super::network::{self, positional_row, LN_EPS};
use super::params::{Attn, Ffn, Linear, ModelParams, Norm};
use super::sequence::UnitSequence;
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, layer_norm_row, log_softmax_in_place, softmax_in_place, swish};
use crate::numerics::{Graph, Tensor};

fn check_prefix(prefix: &UnitSequence, p: &ModelParams) -> Result<()> {
    if prefix.len() > p.config.max_target_len {
        return Err(Error::InvalidArgument(format!(
            "prefix of {} units exceeds max_target_len {}",
            prefix.len(),
            p.config.max_target_len
        )));
    }
    prefix.check_vocab(p.config.vocab)
}

fn teacher_forced(prefix: &UnitSequence, x: &Tensor, p: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new(&p.store);
    let mem = g.input(x.clone())?;
    let inputs: Vec<usize> = std::iter::once(p.config.bos()).chain(prefix.units().iter().copied()).collect();
    let logits = network::decoder_logits(&mut g, p, mem, &inputs)?;
    Ok(g.value(logits).clone())
}

/// Distribution over the K units and eos following `prefix`.
pub fn decode_step(prefix: &UnitSequence, x: &Tensor, params: &ModelParams) -> Result<Vec<f64>> {
    check_prefix(prefix, params)?;
    let logits = teacher_forced(prefix, x, params)?;
    let mut probs = logits.row(logits.rows() - 1).to_vec();
    softmax_in_place(&mut probs);
    Ok(probs)
}

/// `log p(Y | X)`, including the final eos step.
pub fn score_sequence(y: &UnitSequence, x: &Tensor, params: &ModelParams) -> Result<f64> {
    check_prefix(y, params)?;
    let logits = teacher_forced(y, x, params)?;
    let targets = y.units().iter().copied().chain(std::iter::once(params.config.eos()));
    let mut total = 0.0;
    for (r, t) in targets.enumerate() {
        let mut row = logits.row(r).to_vec();
        log_softmax_in_place(&mut row);
        total += row[t];
    }
    Ok(total)
}

/// Self-attention cache of one hypothesis.
#[derive(Clone, Debug)]
pub(crate) struct DecoderState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

/// Decoder over fixed encoder memory with projected cross-attention keys and values.
pub(crate) struct CachedDecoder<'a> {
    p: &'a ModelParams,
    cross: Vec<(Vec<f64>, Vec<f64>)>,
    tm: usize,
}

fn ln_rows(p: &ModelParams, n: Norm, x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        layer_norm_row(xr, p.t(n.g), p.t(n.b), LN_EPS, or);
    }
    out
}

fn apply(p: &ModelParams, l: Linear, x: &[f64], inp: usize) -> Vec<f64> {
    let w = p.store.get(l.w);
    kernels::linear(x, x.len() / inp, w.data(), Some(p.t(l.b)), inp, w.cols())
}

/// One query row attending over `t` cached key/value rows.
fn attend(q: &[f64], keys: &[f64], values: &[f64], t: usize, heads: usize, out: &mut [f64]) {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = kernels::dot(&q[off..off + dh], &keys[j * d + off..j * d + off + dh]) * scale;
        }
        softmax_in_place(&mut scores);
        let o = &mut out[off..off + dh];
        o.fill(0.0);
        for (j, &s) in scores.iter().enumerate() {
            for (oc, vc) in o.iter_mut().zip(&values[j * d + off..j * d + off + dh]) {
                *oc += s * vc;
            }
        }
    }
}

fn ffn_rows(p: &ModelParams, f: &Ffn, x: &[f64], d: usize) -> Vec<f64> {
    let h = ln_rows(p, f.norm, x, d);
    let mut u = apply(p, f.up, &h, d);
    u.iter_mut().for_each(|v| *v = swish(*v));
    apply(p, f.down, &u, p.config.ffn_dim)
}

impl<'a> CachedDecoder<'a> {
    pub(crate) fn new(p: &'a ModelParams, x: &Tensor) -> Result<Self> {
        let d = p.config.dim;
        if x.shape().len() != 2 || x.cols() != d || x.rows() == 0 {
            return Err(Error::Shape(format!("memory shape {:?} vs model dim {d}", x.shape())));
        }
        x.check_finite("decoder memory")?;
        let cross = p
            .layout
            .dec
            .iter()
            .map(|l| (apply(p, l.cross_attn.k, x.data(), d), apply(p, l.cross_attn.v, x.data(), d)))
            .collect();
        Ok(CachedDecoder { p, cross, tm: x.rows() })
    }

    pub(crate) fn start(&self) -> DecoderState {
        let n = self.p.layout.dec.len();
        DecoderState {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    fn self_attend(&self, a: &Attn, layer: usize, states: &mut [DecoderState], x: &[f64]) -> Vec<f64> {
        let d = self.p.config.dim;
        let h = ln_rows(self.p, a.norm, x, d);
        let q = apply(self.p, a.q, &h, d);
        let k = apply(self.p, a.k, &h, d);
        let v = apply(self.p, a.v, &h, d);
        let mut att = vec![0.0; x.len()];
        for (b, s) in states.iter_mut().enumerate() {
            let rows = b * d..(b + 1) * d;
            s.keys[layer].extend_from_slice(&k[rows.clone()]);
            s.values[layer].extend_from_slice(&v[rows.clone()]);
            let t = s.keys[layer].len() / d;
            attend(&q[rows.clone()], &s.keys[layer], &s.values[layer], t, self.p.config.heads, &mut att[rows]);
        }
        apply(self.p, a.o, &att, d)
    }

    fn cross_attend(&self, a: &Attn, layer: usize, x: &[f64]) -> Vec<f64> {
        let d = self.p.config.dim;
        let h = ln_rows(self.p, a.norm, x, d);
        let q = apply(self.p, a.q, &h, d);
        let (ck, cv) = &self.cross[layer];
        let mut att = vec![0.0; x.len()];
        for (qr, or) in q.chunks_exact(d).zip(att.chunks_exact_mut(d)) {
            attend(qr, ck, cv, self.tm, self.p.config.heads, or);
        }
        apply(self.p, a.o, &att, d)
    }

    /// Feeds one token to each hypothesis and returns its next-symbol log-probabilities.
    pub(crate) fn step(&self, states: &mut [DecoderState], tokens: &[usize]) -> Vec<Vec<f64>> {
        let p = self.p;
        let d = p.config.dim;
        let embed = p.store.get(p.layout.embed);
        let scale = (d as f64).sqrt();
        let mut x = vec![0.0; states.len() * d];
        for ((s, &tok), row) in states.iter().zip(tokens).zip(x.chunks_exact_mut(d)) {
            if p.config.positional {
                positional_row(s.len, row);
            }
            for (o, e) in row.iter_mut().zip(embed.row(tok)) {
                *o += e * scale;
            }
        }
        for (li, layer) in p.layout.dec.iter().enumerate() {
            let a = self.self_attend(&layer.self_attn, li, states, &x);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
            let c = self.cross_attend(&layer.cross_attn, li, &x);
            x.iter_mut().zip(&c).for_each(|(x, c)| *x += c);
            let f = ffn_rows(p, &layer.ffn, &x, d);
            x.iter_mut().zip(&f).for_each(|(x, f)| *x += f);
        }
        for s in states.iter_mut() {
            s.len += 1;
        }
        let h = ln_rows(p, p.layout.dec_norm, &x, d);
        let logits = apply(p, p.layout.out, &h, d);
        logits
            .chunks_exact(p.config.n_symbols())
            .map(|r| {
                let mut r = r.to_vec();
                log_softmax_in_place(&mut r);
                r
            })
            .collect()
    }
}

/// Lexicographic order of `a_prefix ++ a_extra` against `b_prefix ++ b_extra`;
/// a proper prefix sorts first.
fn cmp_body(a: &[usize], a_extra: Option<usize>, b: &[usize], b_extra: Option<usize>) -> Ordering {
    a.iter().chain(a_extra.iter()).cmp(b.iter().chain(b_extra.iter()))
}

struct Hyp {
    units: Vec<usize>,
    score: f64,
    state: DecoderState,
}

fn check_search(x: &Tensor, max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    x.check_finite("encoder output")
}

/// Beam search by cumulative log-probability without length penalty.
///
/// Each step ranks every one-symbol extension of the live hypotheses and keeps
/// the best `beam`; extensions by eos become finished. Ties rank the
/// lexicographically smaller body first, so lower unit ids and then shorter
/// sequences win. Search stops once the best finished score is at least the
/// best live one. Lengths are capped at `min(max_len, max_target_len)`.
pub fn beam_search(x: &Tensor, params: &ModelParams, beam: usize, max_len: usize) -> Result<UnitSequence> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    check_search(x, max_len)?;
    let max_len = max_len.min(params.config.max_target_len);
    let eos = params.config.eos();
    let dec = CachedDecoder::new(params, x)?;
    let mut alive = vec![Hyp {
        units: Vec::new(),
        score: 0.0,
        state: dec.start(),
    }];
    let mut last = vec![params.config.bos()];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    loop {
        let mut states: Vec<DecoderState> = alive.iter().map(|h| h.state.clone()).collect();
        let lps = dec.step(&mut states, &last);
        for (h, s) in alive.iter_mut().zip(states) {
            h.state = s;
        }
        let mut cands: Vec<(usize, usize, f64)> = Vec::with_capacity(alive.len() * (eos + 1));
        for (b, (h, lp)) in alive.iter().zip(&lps).enumerate() {
            for (sym, &l) in lp.iter().enumerate() {
                if sym != eos && h.units.len() >= max_len {
                    continue;
                }
                cands.push((b, sym, h.score + l));
            }
        }
        let extra = |sym: usize| (sym != eos).then_some(sym);
        cands.sort_by(|&(ba, sa, xa), &(bb, sb, xb)| {
            xb.total_cmp(&xa)
                .then_with(|| cmp_body(&alive[ba].units, extra(sa), &alive[bb].units, extra(sb)))
        });
        cands.truncate(beam);
        let mut next = Vec::new();
        let mut next_last = Vec::new();
        for &(b, sym, score) in &cands {
            if sym == eos {
                finished.push((alive[b].units.clone(), score));
            } else {
                let mut units = alive[b].units.clone();
                units.push(sym);
                next.push(Hyp {
                    units,
                    score,
                    state: alive[b].state.clone(),
                });
                next_last.push(sym);
            }
        }
        alive = next;
        last = next_last;
        let best_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        if alive.is_empty() || best_done >= best_alive {
            break;
        }
    }
    finished.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| cmp_body(&a.0, None, &b.0, None)));
    Ok(UnitSequence(finished.swap_remove(0).0))
}

/// Step-wise argmax with the same tie rule as [`beam_search`]: eos wins ties
/// with units, and lower unit ids win ties among units.
pub fn greedy_decode(x: &Tensor, params: &ModelParams, max_len: usize) -> Result<UnitSequence> {
    check_search(x, max_len)?;
    let max_len = max_len.min(params.config.max_target_len);
    let eos = params.config.eos();
    let dec = CachedDecoder::new(params, x)?;
    let mut state = [dec.start()];
    let mut tok = params.config.bos();
    let mut units = Vec::new();
    loop {
        let lp = dec.step(&mut state, &[tok]).swap_remove(0);
        if units.len() >= max_len {
            break;
        }
        let best = (0..eos).fold(0, |best, u| if lp[u] > lp[best] { u } else { best });
        if lp[eos] >= lp[best] {
            break;
        }
        units.push(best);
        tok = best;
    }
    Ok(UnitSequence(units))
}
