//! `MPTH` checkpoint: magic, u32 version, u64 spec hash, then named f32 blocks
//! (u16 name length, name bytes, u32 count, values), all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{build_model, ModelSpec, ThetaParams};
use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const THETA_MAGIC: &[u8; 4] = b"MPTH";
pub const THETA_VERSION: u32 = 1;

fn blocks(theta: &ThetaParams<f32>) -> Vec<(String, Vec<f32>)> {
    let mut out: Vec<(String, Vec<f32>)> =
        theta.params.iter().map(|p| (p.name.clone(), p.tensor.data().to_vec())).collect();
    for (i, s) in theta.bn.iter().enumerate() {
        out.push((format!("bn{i}.running_mean"), s.running_mean.clone()));
        out.push((format!("bn{i}.running_var"), s.running_var.clone()));
    }
    out
}

pub fn write_theta(theta: &ThetaParams<f32>, spec: &ModelSpec, mut out: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(THETA_MAGIC);
    buf.extend_from_slice(&THETA_VERSION.to_le_bytes());
    buf.extend_from_slice(&spec.spec_hash().to_le_bytes());
    for (name, values) in blocks(theta) {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Reads θ for `spec`; the embedded spec hash and every block name and size must match.
pub fn read_theta(spec: &ModelSpec, mut input: impl Read) -> Result<ThetaParams<f32>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes, "θ checkpoint");
    if r.take(4)? != THETA_MAGIC {
        return Err(Error::Format("not a θ checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != THETA_VERSION {
        return Err(Error::Format(format!("unsupported θ checkpoint version {version}")));
    }
    let hash = r.u64()?;
    if hash != spec.spec_hash() {
        return Err(Error::Format(format!("θ checkpoint was written for a different model ({hash:016x})")));
    }
    // Shapes and names come from a template built for the same spec.
    let mut theta: ThetaParams<f32> = build_model(spec, &mut crate::seeded_rng(0))?;
    let expected = blocks(&theta);
    let mut loaded = Vec::with_capacity(expected.len());
    for (name, values) in &expected {
        let len = r.u16()? as usize;
        let got = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
        if got != name {
            return Err(Error::Format(format!("expected block '{name}', found '{got}'")));
        }
        let count = r.u32()? as usize;
        if count != values.len() {
            return Err(Error::Format(format!("block '{name}' holds {count} values, expected {}", values.len())));
        }
        loaded.push(r.f32s(count)?);
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after the last θ block".into()));
    }
    let mut loaded = loaded.into_iter();
    for p in theta.params.iter_mut() {
        p.tensor = Tensor::new(p.tensor.shape().to_vec(), loaded.next().expect("counted"))?;
    }
    for s in theta.bn.iter_mut() {
        s.running_mean = loaded.next().expect("counted");
        s.running_var = loaded.next().expect("counted");
    }
    Ok(theta)
}

pub fn write_theta_file(theta: &ThetaParams<f32>, spec: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
    write_theta(theta, spec, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_theta_file(spec: &ModelSpec, path: impl AsRef<Path>) -> Result<ThetaParams<f32>> {
    read_theta(spec, std::fs::File::open(path)?)
}
