use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::CorpusSpec;
use crate::model::UnitSequence;
use crate::units::reduce;
use crate::util::rng_for;

/// The seeded toy language behind a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Language {
    /// Target units emitted for each source symbol.
    pub unit_pairs: Vec<[usize; 2]>,
    /// Modifier symbols swap places with a following non-modifier in translation.
    pub modifier: Vec<bool>,
    /// Weighted successors of each symbol.
    pub successors: Vec<Vec<(usize, f64)>>,
    /// `(frequency Hz, amplitude)` partials of each symbol's sound.
    pub sounds: Vec<Vec<(f64, f64)>>,
    /// Lip-feature prototype of each viseme group.
    pub visemes: Vec<Vec<f64>>,
}

impl Language {
    pub fn new(spec: &CorpusSpec) -> Self {
        let v = spec.source_vocab;
        let mut rng = rng_for(spec.language_seed, &[0x1a46]);

        let mut pairs = Vec::with_capacity(v);
        while pairs.len() < v {
            let a = rng.random_range(0..spec.k);
            let b = rng.random_range(0..spec.k);
            if a != b && !pairs.contains(&[a, b]) {
                pairs.push([a, b]);
            }
        }

        let mut order: Vec<usize> = (0..v).collect();
        order.shuffle(&mut rng);
        let n_mod = (v / 4).max(1);
        let mut modifier = vec![false; v];
        for &s in &order[..n_mod] {
            modifier[s] = true;
        }

        let successors = (0..v)
            .map(|_| {
                let mut next: Vec<usize> = (0..v).collect();
                next.shuffle(&mut rng);
                next.truncate(4.min(v));
                next.sort_unstable();
                next.into_iter().map(|s| (s, rng.random_range(0.5..2.0))).collect()
            })
            .collect();

        // partials on a log-spaced grid; every symbol gets a distinct triple
        let grid: Vec<f64> = (0..24).map(|i| 250.0 * (3600.0f64 / 250.0).powf(i as f64 / 23.0)).collect();
        let mut sounds: Vec<Vec<(f64, f64)>> = Vec::with_capacity(v);
        while sounds.len() < v {
            let mut idx: Vec<usize> = (0..grid.len()).collect();
            idx.shuffle(&mut rng);
            let mut pick = idx[..3].to_vec();
            pick.sort_unstable();
            let cand: Vec<(f64, f64)> = pick.iter().map(|&i| (grid[i], rng.random_range(0.15..0.35))).collect();
            if !sounds.iter().any(|s| s.iter().zip(&cand).all(|(a, b)| a.0 == b.0)) {
                sounds.push(cand);
            }
        }

        let visemes = (0..spec.n_viseme_groups())
            .map(|_| (0..spec.video_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();

        Language {
            unit_pairs: pairs,
            modifier,
            successors,
            sounds,
            visemes,
        }
    }

    pub fn sample_sentence(&self, spec: &CorpusSpec, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut out = vec![rng.random_range(0..spec.source_vocab)];
        while out.len() < len {
            let succ = &self.successors[*out.last().unwrap()];
            let total: f64 = succ.iter().map(|s| s.1).sum();
            let mut r = rng.random_range(0.0..total);
            let mut next = succ[succ.len() - 1].0;
            for &(s, w) in succ {
                if r < w {
                    next = s;
                    break;
                }
                r -= w;
            }
            out.push(next);
        }
        out
    }

    /// Oracle translation: a modifier followed by a non-modifier trade places,
    /// each symbol becomes its unit pair, and repeated units collapse.
    pub fn translate(&self, source: &[usize]) -> UnitSequence {
        let mut order = source.to_vec();
        let mut i = 0;
        while i + 1 < order.len() {
            if self.modifier[order[i]] && !self.modifier[order[i + 1]] {
                order.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        let units = order.iter().flat_map(|&s| self.unit_pairs[s]).collect();
        reduce(&UnitSequence(units))
    }
}
