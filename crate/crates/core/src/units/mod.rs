//! Discrete units: k-means codebooks, nearest-centroid quantization and
//! run-length reduction.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{read_avtf, write_avtf, AvtfRecord};
use crate::model::UnitSequence;
use crate::numerics::Tensor;
use crate::util::{atomic_write, rng_for};

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `K × D` centroids.
    pub centroids: Tensor,
    /// Inertia after each assignment step, first entry from the seeding.
    pub inertia: Vec<f64>,
}

impl Codebook {
    pub fn new(centroids: Tensor) -> Result<Self> {
        if centroids.shape().len() != 2 || centroids.rows() == 0 {
            return Err(Error::Shape(format!("codebook must be K x D with K >= 1, got {:?}", centroids.shape())));
        }
        centroids.check_finite("codebook")?;
        Ok(Codebook {
            centroids,
            inertia: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Index of the nearest centroid and its squared distance; ties go to the lower id.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.k() {
            let d = sq_dist(x, self.centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let first = points.first().ok_or(Error::Empty("k-means points"))?;
    let d = first.len();
    if let Some(i) = points.iter().position(|p| p.len() != d) {
        return Err(Error::Shape(format!("point {i} has dim {} but point 0 has {d}", points[i].len())));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means points"));
    }
    Ok(d)
}

/// k-means++ seeding followed by Lloyd iterations until assignments settle
/// or `max_iters` is reached. A cluster left empty is moved onto the point
/// farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    let d = check_points(points)?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let n = points.len();
    let mut rng = rng_for(seed, &[0x6b6d]);

    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            // floating round-off can land on a zero-weight point
            if nearest[idx] == 0.0 {
                idx = (0..n).rev().find(|&i| nearest[i] > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (m, p) in nearest.iter_mut().zip(points) {
            *m = m.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) {
        points
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (c, cent) in centroids.iter().enumerate() {
                    let dd = sq_dist(p, cent);
                    if dd < best.1 {
                        best = (c, dd);
                    }
                }
                best
            })
            .unzip()
    };

    let (mut labels, mut dists) = assign(&centroids);
    let mut inertia = vec![dists.iter().sum::<f64>()];
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in (0..k).filter(|&c| counts[c] == 0) {
            // farthest point from its current centroid, measured after the update
            let far = (0..n)
                .map(|i| (i, sq_dist(&points[i], &centroids[labels[i]])))
                .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
            if far.1 > 0.0 {
                centroids[c] = points[far.0].clone();
                labels[far.0] = c;
            }
        }
        let (new_labels, new_dists) = assign(&centroids);
        let settled = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        inertia.push(dists.iter().sum());
        if settled {
            break;
        }
    }
    let flat = centroids.into_iter().flatten().collect();
    Ok(Codebook {
        centroids: Tensor::matrix(k, d, flat)?,
        inertia,
    })
}

/// Nearest centroid per frame of a `T × D` matrix.
pub fn quantize(features: &Tensor, cb: &Codebook) -> Result<UnitSequence> {
    if features.cols() != cb.dim() {
        return Err(Error::Shape(format!("features dim {} vs codebook dim {}", features.cols(), cb.dim())));
    }
    Ok(UnitSequence((0..features.rows()).map(|r| cb.nearest(features.row(r)).0).collect()))
}

/// Collapses runs of repeated units.
pub fn reduce(units: &UnitSequence) -> UnitSequence {
    let mut out: Vec<usize> = Vec::with_capacity(units.len());
    for &u in units.units() {
        if out.last() != Some(&u) {
            out.push(u);
        }
    }
    UnitSequence(out)
}

pub fn write_units(path: &Path, seqs: &[UnitSequence]) -> Result<()> {
    let mut text = String::new();
    for s in seqs {
        text.push_str(&s.to_line());
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

pub fn read_units(path: &Path) -> Result<Vec<UnitSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| UnitSequence::parse(l).map_err(|m| Error::format(path, format!("line {}: {m}", i + 1))))
        .collect()
}

pub fn save_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let rec = AvtfRecord {
        rows: cb.k() as u32,
        cols: cb.dim() as u32,
        frame_rate_millihz: 0,
        data: cb.centroids.data().iter().map(|&v| v as f32).collect(),
    };
    write_avtf(path, &rec)
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let rec = read_avtf(path)?;
    let t = Tensor::matrix(rec.rows as usize, rec.cols as usize, rec.data.iter().map(|&v| v as f64).collect())?;
    Codebook::new(t).map_err(|e| Error::format(path, e.to_string()))
}
