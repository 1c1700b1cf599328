//! PISTRJ binary trajectory frames.
//!
//! Little-endian layout:
//!
//! ```text
//! bytes 0..8    magic "PISTRJ01"
//! bytes 8..12   u32 n_frames
//! bytes 12..16  u32 n_atoms
//! bytes 16..20  f32 dt_ps
//! bytes 20..    n_frames * n_atoms * 3 f32 (frame-major, atom-major, x y z)
//! ```

use std::sync::Arc;

use super::{Topology, Trajectory};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PISTRJ01";
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub n_frames: u32,
    pub n_atoms: u32,
    pub dt_ps: f32,
}

impl Header {
    pub fn payload_len(&self) -> usize {
        self.n_frames as usize * self.n_atoms as usize * 12
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..8].copy_from_slice(MAGIC);
        out[8..12].copy_from_slice(&self.n_frames.to_le_bytes());
        out[12..16].copy_from_slice(&self.n_atoms.to_le_bytes());
        out[16..20].copy_from_slice(&self.dt_ps.to_le_bytes());
        out
    }
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "stream of {} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("magic mismatch, not a PISTRJ01 stream".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    Ok(Header {
        n_frames: u32_at(8),
        n_atoms: u32_at(12),
        dt_ps: f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")),
    })
}

/// Validates the stream against `topology` and returns its header.
pub fn validate(bytes: &[u8], topology: &Topology) -> Result<Header> {
    let header = read_header(bytes)?;
    if header.n_atoms as usize != topology.n_atoms() {
        return Err(Error::Consistency(format!(
            "stream has {} atoms, topology has {}",
            header.n_atoms,
            topology.n_atoms()
        )));
    }
    let expected = header.payload_len();
    let actual = bytes.len() - HEADER_LEN;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after the {expected}-byte payload",
            actual - expected
        )));
    }
    Ok(header)
}

pub fn read_frames(bytes: &[u8], topology: Arc<Topology>) -> Result<Trajectory> {
    let header = validate(bytes, &topology)?;
    let coordinates = bytes[HEADER_LEN..]
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().expect("4 bytes")) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    Trajectory::new(topology, coordinates, header.dt_ps as f64)
}

pub fn write_frames(trajectory: &Trajectory) -> Vec<u8> {
    let header = Header {
        n_frames: trajectory.n_frames() as u32,
        n_atoms: trajectory.n_atoms() as u32,
        dt_ps: trajectory.dt_ps() as f32,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len());
    out.extend_from_slice(&header.to_bytes());
    for p in trajectory.coordinates() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

/// A self-contained stream holding frames `[start, start + count)` of `bytes`.
/// The payload is a byte-for-byte sub-range of the source payload; `count` is
/// clipped to the frames available.
pub fn slice_frames(bytes: &[u8], start: usize, count: usize) -> Result<Vec<u8>> {
    let header = read_header(bytes)?;
    let total = header.n_frames as usize;
    if start > total {
        return Err(Error::InvalidInput(format!("start frame {start} beyond {total} frames")));
    }
    let count = count.min(total - start);
    let frame_len = header.n_atoms as usize * 12;
    let begin = HEADER_LEN + start * frame_len;
    let end = begin + count * frame_len;
    if bytes.len() < end {
        return Err(Error::Truncated { expected: end - HEADER_LEN, actual: bytes.len() - HEADER_LEN });
    }
    let sub = Header { n_frames: count as u32, ..header };
    let mut out = Vec::with_capacity(HEADER_LEN + end - begin);
    out.extend_from_slice(&sub.to_bytes());
    out.extend_from_slice(&bytes[begin..end]);
    Ok(out)
}
