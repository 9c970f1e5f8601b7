//! BLEU-vs-SNR curves as per-curve CSV files and a standalone SVG chart.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use super::SweepResult;
use crate::error::{Error, Result};
use crate::util::atomic_write;

/// `(category_modality, points sorted by SNR)` for every noisy curve.
fn curves(result: &SweepResult) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in &result.rows {
        let (Some(c), Some(snr)) = (r.category, r.snr_db) else {
            continue;
        };
        let name = format!("{}_{}", c.name(), r.modality);
        match out.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((snr, r.bleu)),
            None => out.push((name, vec![(snr, r.bleu)])),
        }
    }
    for (_, pts) in &mut out {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

/// One `snr_db,bleu` CSV per curve, keyed by file name.
pub fn curve_csvs(result: &SweepResult) -> Vec<(String, String)> {
    curves(result)
        .into_iter()
        .map(|(name, pts)| {
            let mut s = String::from("snr_db,bleu\n");
            for (x, y) in pts {
                writeln!(s, "{x},{y:.4}").unwrap();
            }
            (format!("{name}.csv"), s)
        })
        .collect()
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub fn sweep_svg(result: &SweepResult) -> Result<String> {
    let curves = curves(result);
    if curves.is_empty() {
        return Err(Error::Empty("no noisy rows to plot"));
    }
    let xs: Vec<f64> = curves.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    let (x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let (w, h, left, top, right, bottom) = (640.0, 400.0, 60.0, 20.0, 170.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - y / 100.0) * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = sy(tick);
        writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, left + pw).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"#, left - 6.0, y + 4.0).unwrap();
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for t in ticks {
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#, sx(t), top + ph + 18.0).unwrap();
    }
    writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">SNR (dB)</text>"#, left + pw / 2.0, h - 12.0).unwrap();
    writeln!(s, r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">BLEU</text>"#, top + ph / 2.0, top + ph / 2.0).unwrap();
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = if name.ends_with("_a") { r#" stroke-dasharray="5,3""# } else { "" };
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#, path.join(" ")).unwrap();
        for &(x, y) in pts {
            writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y)).unwrap();
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#, lx + 22.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, lx + 28.0, ly + 4.0).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the curve CSVs and `bleu_vs_snr.svg` into `dir`.
pub fn write_plot(result: &SweepResult, dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (name, text) in curve_csvs(result) {
        let p = dir.join(name);
        atomic_write(&p, text.as_bytes())?;
        written.push(p);
    }
    if svg {
        let p = dir.join("bleu_vs_snr.svg");
        atomic_write(&p, sweep_svg(result)?.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
