//! `MPD1` dataset file: magic, u32 version, u32 N, C, H, W, class_count,
//! N·C·H·W f32 pixels and N u16 labels, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::Dataset;
use crate::bytes::ByteReader;
use crate::error::{Error, Result};

pub const MPDS_MAGIC: &[u8; 4] = b"MPD1";
pub const MPDS_VERSION: u32 = 1;

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit the dataset format")))
}

pub fn write_mpds(ds: &Dataset, mut out: impl Write) -> Result<()> {
    if ds.class_count() > u16::MAX as usize + 1 {
        return Err(Error::Format(format!("{} classes do not fit u16 labels", ds.class_count())));
    }
    let [c, h, w] = ds.shape();
    let mut buf = Vec::with_capacity(28 + ds.images().len() * 4 + ds.len() * 2);
    buf.extend_from_slice(MPDS_MAGIC);
    for v in [
        MPDS_VERSION,
        u32_field(ds.len(), "instance count")?,
        u32_field(c, "channel count")?,
        u32_field(h, "height")?,
        u32_field(w, "width")?,
        u32_field(ds.class_count(), "class count")?,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in ds.images() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in ds.labels() {
        buf.extend_from_slice(&(l as u16).to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_mpds(mut input: impl Read) -> Result<Dataset> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes, "dataset file");
    if r.take(4)? != MPDS_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MPDS_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [n, c, h, w, classes] = dims;
    let pixels = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("dataset header sizes overflow".into()))?;
    let images = r.f32s(pixels)?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.u16()? as usize;
        if l >= classes {
            return Err(Error::Format(format!("label {l} out of range for {classes} classes")));
        }
        labels.push(l);
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after the dataset labels".into()));
    }
    Dataset::new([c, h, w], images, labels, classes).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_mpds(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_mpds(ds, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_mpds(path: impl AsRef<Path>) -> Result<Dataset> {
    read_mpds(std::fs::File::open(path)?)
}
