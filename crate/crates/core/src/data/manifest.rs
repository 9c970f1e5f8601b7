//! Tab-separated corpus manifests: `id  audio_path  video_path  units_path  split`.
//! Paths are relative to the manifest's directory; `-` marks an absent video.

use std::path::{Path, PathBuf};

use super::Split;
use crate::error::{Error, Result};
use crate::util::atomic_write;

pub const MANIFEST_HEADER: &str = "id\taudio_path\tvideo_path\tunits_path\tsplit";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_path: String,
    pub video_path: Option<String>,
    pub units_path: String,
    pub split: Split,
}

/// Resolves a manifest-relative path.
pub fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    let rel = Path::new(rel);
    if rel.is_absolute() {
        return rel.to_path_buf();
    }
    manifest.parent().unwrap_or(Path::new("")).join(rel)
}

fn check_field(value: &str, what: &str) -> Result<()> {
    if value.is_empty() || value.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!("{what} {value:?} cannot be written to a manifest")));
    }
    Ok(())
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for r in records {
        check_field(&r.id, "id")?;
        check_field(&r.audio_path, "audio path")?;
        check_field(&r.units_path, "units path")?;
        let video = r.video_path.as_deref().unwrap_or("-");
        check_field(video, "video path")?;
        text.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.id, r.audio_path, video, r.units_path, r.split));
    }
    atomic_write(path, text.as_bytes())
}

/// Reads and validates a manifest, including that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        Some((_, h)) => return Err(err(1, format!("expected header {MANIFEST_HEADER:?}, found {h:?}"))),
        None => return Err(err(1, "missing header".into())),
    }
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines {
        let n = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(err(n, format!("expected 5 tab-separated columns, found {}", cols.len())));
        }
        if cols.iter().any(|c| c.is_empty()) {
            return Err(err(n, "empty column".into()));
        }
        let split = cols[4].parse::<Split>().map_err(|m| err(n, m))?;
        if !seen.insert(cols[0].to_string()) {
            return Err(err(n, format!("duplicate id {:?}", cols[0])));
        }
        let video = (cols[2] != "-").then(|| cols[2].to_string());
        for rel in [Some(cols[1]), video.as_deref(), Some(cols[3])].into_iter().flatten() {
            if !resolve(path, rel).is_file() {
                return Err(err(n, format!("dangling path {rel:?}")));
            }
        }
        records.push(ManifestRecord {
            id: cols[0].to_string(),
            audio_path: cols[1].to_string(),
            video_path: video,
            units_path: cols[3].to_string(),
            split,
        });
    }
    Ok(records)
}
