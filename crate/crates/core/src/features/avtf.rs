//! `AVTF` tensor files: magic, then little-endian `u32` rows, cols and
//! frame rate in milli-hertz, then `rows × cols` little-endian `f32`.
//!
//! The same header layout with magic `AVTD` and an `f64` payload frames the
//! parameter tensors inside checkpoints, which must round-trip exactly.

use std::path::Path;

use super::{FeatureStream, Modality, Waveform};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::util::atomic_write;

pub const AVTF_MAGIC: &[u8; 4] = b"AVTF";
pub const AVTD_MAGIC: &[u8; 4] = b"AVTD";

#[derive(Clone, Debug, PartialEq)]
pub struct AvtfRecord {
    pub rows: u32,
    pub cols: u32,
    pub frame_rate_millihz: u32,
    pub data: Vec<f32>,
}

impl AvtfRecord {
    pub fn from_stream(fs: &FeatureStream) -> Self {
        AvtfRecord {
            rows: fs.len() as u32,
            cols: fs.dim() as u32,
            frame_rate_millihz: (fs.frame_rate_hz * 1000.0).round() as u32,
            data: fs.frames.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_stream(&self, modality: Modality) -> Result<FeatureStream> {
        let t = Tensor::matrix(self.rows as usize, self.cols as usize, self.data.iter().map(|&v| v as f64).collect())?;
        FeatureStream::new(t, self.frame_rate_millihz as f64 / 1000.0, modality)
    }

    /// A mono waveform stored as one column at `sample_rate · 1000` milli-hertz.
    pub fn from_waveform(w: &Waveform) -> Self {
        AvtfRecord {
            rows: w.len() as u32,
            cols: 1,
            frame_rate_millihz: w.sample_rate * 1000,
            data: w.samples.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_waveform(&self) -> Result<Waveform> {
        if self.cols != 1 || !self.frame_rate_millihz.is_multiple_of(1000) {
            return Err(Error::InvalidArgument("record is not a mono waveform".into()));
        }
        Waveform::new(self.data.iter().map(|&v| v as f64).collect(), self.frame_rate_millihz / 1000)
    }
}

fn header(out: &mut Vec<u8>, magic: &[u8; 4], rows: u32, cols: u32, rate: u32) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
}

pub fn write_avtf_bytes(rec: &AvtfRecord, out: &mut Vec<u8>) {
    header(out, AVTF_MAGIC, rec.rows, rec.cols, rec.frame_rate_millihz);
    for v in &rec.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte buffer that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_header(r: &mut Reader, magic: &[u8; 4]) -> std::result::Result<(u32, u32, u32), String> {
    let m = r.take(4)?;
    if m != magic {
        return Err(format!("bad magic {:?}", String::from_utf8_lossy(m)));
    }
    Ok((r.u32()?, r.u32()?, r.u32()?))
}

pub(crate) fn read_avtf_from(r: &mut Reader) -> std::result::Result<AvtfRecord, String> {
    let (rows, cols, rate) = read_header(r, AVTF_MAGIC)?;
    let n = rows as usize * cols as usize;
    let bytes = r.take(n * 4)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(AvtfRecord {
        rows,
        cols,
        frame_rate_millihz: rate,
        data,
    })
}

pub fn read_avtf_bytes(buf: &[u8]) -> std::result::Result<AvtfRecord, String> {
    let mut r = Reader::new(buf);
    let rec = read_avtf_from(&mut r)?;
    if !r.is_done() {
        return Err("trailing bytes after tensor payload".into());
    }
    Ok(rec)
}

pub fn write_avtf(path: &Path, rec: &AvtfRecord) -> Result<()> {
    let mut out = Vec::with_capacity(16 + rec.data.len() * 4);
    write_avtf_bytes(rec, &mut out);
    atomic_write(path, &out)
}

pub fn read_avtf(path: &Path) -> Result<AvtfRecord> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_avtf_bytes(&buf).map_err(|m| Error::format(path, m))
}

/// Rank-2 `f64` tensor framed with the `AVTD` header.
pub(crate) fn write_f64_frame(t: &Tensor, out: &mut Vec<u8>) {
    header(out, AVTD_MAGIC, t.rows() as u32, t.cols() as u32, 0);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f64_frame(r: &mut Reader) -> std::result::Result<Tensor, String> {
    let (rows, cols, _) = read_header(r, AVTD_MAGIC)?;
    let n = rows as usize * cols as usize;
    let bytes = r.take(n * 8)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::matrix(rows as usize, cols as usize, data).map_err(|e| e.to_string())
}
