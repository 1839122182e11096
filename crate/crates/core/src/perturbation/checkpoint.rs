//! `MPPH` checkpoint: magic, u32 version, then six tagged little-endian f32 sections.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{PhiParams, PHI_SCALARS};
use crate::bytes::ByteReader;
use crate::error::{Error, Result};

pub const PHI_MAGIC: &[u8; 4] = b"MPPH";
pub const PHI_VERSION: u32 = 1;

const SECTIONS: [(u8, usize); 6] = [(0x01, 9), (0x02, 9), (0x03, 9), (0x04, 9), (0x05, 36), (0x06, 10)];

pub fn write_phi(phi: &PhiParams<f32>, mut out: impl Write) -> Result<()> {
    let flat = phi.to_flat();
    let mut buf = Vec::with_capacity(8 + 6 * 5 + 4 * PHI_SCALARS);
    buf.extend_from_slice(PHI_MAGIC);
    buf.extend_from_slice(&PHI_VERSION.to_le_bytes());
    let mut offset = 0;
    for (tag, count) in SECTIONS {
        buf.push(tag);
        buf.extend_from_slice(&(count as u32).to_le_bytes());
        for v in &flat[offset..offset + count] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        offset += count;
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn read_phi(mut input: impl Read) -> Result<PhiParams<f32>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes, "perturbation checkpoint");
    if r.take(4)? != PHI_MAGIC {
        return format_err("not a perturbation checkpoint (bad magic)");
    }
    let version = r.u32()?;
    if version != PHI_VERSION {
        return format_err(format!("unsupported perturbation checkpoint version {version}"));
    }
    let mut sections: [Option<Vec<f32>>; 6] = Default::default();
    while !r.is_empty() {
        let tag = r.u8()?;
        let count = r.u32()? as usize;
        let Some(idx) = SECTIONS.iter().position(|&(t, _)| t == tag) else {
            return format_err(format!("unknown section tag {tag:#04x}"));
        };
        if count != SECTIONS[idx].1 {
            return format_err(format!(
                "section {tag:#04x} holds {count} scalars, expected {}",
                SECTIONS[idx].1
            ));
        }
        if sections[idx].is_some() {
            return format_err(format!("duplicate section {tag:#04x}"));
        }
        sections[idx] = Some(r.f32s(count)?);
    }
    let mut flat = Vec::with_capacity(PHI_SCALARS);
    for (section, (tag, _)) in sections.into_iter().zip(SECTIONS) {
        match section {
            Some(v) => flat.extend(v),
            None => return format_err(format!("missing section {tag:#04x}")),
        }
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return format_err("perturbation checkpoint contains non-finite values");
    }
    PhiParams::from_flat(&flat)
}

pub fn write_phi_file(phi: &PhiParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_phi(phi, std::io::BufWriter::new(file))
}

pub fn read_phi_file(path: impl AsRef<Path>) -> Result<PhiParams<f32>> {
    read_phi(std::fs::File::open(path)?)
}
