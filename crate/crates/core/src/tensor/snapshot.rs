//! Binary tensor snapshots.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"CPT1"            magic
//! u32                rank
//! u32 * rank         dims
//! f32 * prod(dims)   data, row-major
//! ```
//!
//! Several snapshots may be concatenated in one stream.

use std::io::{self, Read, Write};

const MAGIC: &[u8; 4] = b"CPT1";

pub fn write_snapshot<W: Write>(w: &mut W, shape: &[usize], data: &[f32]) -> io::Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("shape {shape:?} does not match {} values", data.len()),
        ));
    }
    w.write_all(MAGIC)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one snapshot, returning `(shape, data)`.
pub fn read_snapshot<R: Read>(r: &mut R) -> io::Result<(Vec<usize>, Vec<f32>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad snapshot magic"));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("rank {rank} too large")));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((shape, data))
}
