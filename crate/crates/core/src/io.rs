//! Binary file formats and small text emitters.
//!
//! All integers are little-endian.
//!
//! * `CDLD` — dictionary: magic, u32 version=1, u32 K, u32 k_f,
//!   `K*k_f*k_f` f64 filter values, u32 JSON length, JSON metadata
//!   `{beta, lambda, corpus, created}`.
//! * `CIMG` — complex image: magic, u32 h, u32 w, f64 Re-plane, f64 Im-plane.
//! * `CDLN` — estimator checkpoint: magic, u32 version=1, u8 variant,
//!   u32 descriptor length, JSON descriptor, u64 parameter count, f64 blob.
//! * `PGM`  — 8-bit magnitude export for eyeballing results.
//!
//! Round-trips are bitwise: loading a written file reproduces the exact
//! f64 payloads.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linops::{ComplexImage, Dictionary, DictionaryMeta};

const DICT_MAGIC: &[u8; 4] = b"CDLD";
const IMAGE_MAGIC: &[u8; 4] = b"CIMG";
const CKPT_MAGIC: &[u8; 4] = b"CDLN";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated file while reading {what}")));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expect {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(expect),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(8 * n, what)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(8 * values.len());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

// ---- dictionary ----

pub fn encode_dictionary(d: &Dictionary) -> Result<Vec<u8>> {
    let meta = serde_json::to_string(&d.meta)
        .map_err(|e| Error::Format(format!("metadata encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(DICT_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(d.filter_count as u32).to_le_bytes());
    out.extend_from_slice(&(d.kernel_size as u32).to_le_bytes());
    push_f64s(&mut out, &d.filters);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    Ok(out)
}

pub fn decode_dictionary(buf: &[u8]) -> Result<Dictionary> {
    let mut r = Reader::new(buf);
    r.magic(DICT_MAGIC)?;
    let version = r.u32("version")?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported dictionary version {version}")));
    }
    let k = r.u32("filter count")? as usize;
    let kf = r.u32("kernel size")? as usize;
    let filters = r.f64s(k * kf * kf, "filters")?;
    let meta_len = r.u32("metadata length")? as usize;
    let meta_bytes = r.take(meta_len, "metadata")?;
    r.done()?;
    let meta: DictionaryMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Format(format!("metadata decode: {e}")))?;
    Dictionary::new(k, kf, filters, meta)
}

pub fn save_dictionary(d: &Dictionary, path: &Path) -> Result<()> {
    fs::write(path, encode_dictionary(d)?)?;
    Ok(())
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    decode_dictionary(&fs::read(path)?)
}

// ---- complex image ----

pub fn encode_image(img: &ComplexImage) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    push_f64s(&mut out, &img.re);
    push_f64s(&mut out, &img.im);
    out
}

pub fn decode_image(buf: &[u8]) -> Result<ComplexImage> {
    let mut r = Reader::new(buf);
    r.magic(IMAGE_MAGIC)?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let re = r.f64s(h * w, "re plane")?;
    let im = r.f64s(h * w, "im plane")?;
    r.done()?;
    Ok(ComplexImage { height: h, width: w, re, im })
}

pub fn save_image(img: &ComplexImage, path: &Path) -> Result<()> {
    fs::write(path, encode_image(img))?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<ComplexImage> {
    decode_image(&fs::read(path)?)
}

// ---- estimator checkpoint container ----

pub struct CheckpointBlob {
    pub variant: u8,
    pub descriptor: String,
    pub params: Vec<f64>,
}

pub fn encode_checkpoint(blob: &CheckpointBlob) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.push(blob.variant);
    out.extend_from_slice(&(blob.descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(blob.descriptor.as_bytes());
    out.extend_from_slice(&(blob.params.len() as u64).to_le_bytes());
    push_f64s(&mut out, &blob.params);
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<CheckpointBlob> {
    let mut r = Reader::new(buf);
    r.magic(CKPT_MAGIC)?;
    let version = r.u32("version")?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let variant = r.u8("variant")?;
    let desc_len = r.u32("descriptor length")? as usize;
    let desc = r.take(desc_len, "descriptor")?;
    let descriptor = String::from_utf8(desc.to_vec())
        .map_err(|e| Error::Format(format!("descriptor not utf-8: {e}")))?;
    let n = r.u64("parameter count")? as usize;
    let params = r.f64s(n, "parameters")?;
    r.done()?;
    Ok(CheckpointBlob { variant, descriptor, params })
}

// ---- PGM magnitude export ----

/// 8-bit binary PGM of the magnitude image, normalized to its own max.
pub fn save_magnitude_pgm(img: &ComplexImage, path: &Path) -> Result<()> {
    let mag = img.magnitude();
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let mut out = Vec::new();
    write!(out, "P5\n{} {}\n255\n", img.width, img.height)?;
    out.extend(mag.iter().map(|&m| (m * scale).round().clamp(0.0, 255.0) as u8));
    fs::write(path, out)?;
    Ok(())
}

// ---- CSV emitters ----

pub fn write_loss_trace_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One evaluation row per reconstructed sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub dict_key: String,
    pub mse: f64,
    pub ssim: f64,
    pub blur: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("sample_id,dict_key,mse,ssim,blur\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.sample_id, r.dict_key, r.mse, r.ssim, r.blur));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows))?;
    Ok(())
}
