//! The `.lat` binary latent format.
//!
//! Layout: magic `CONOLAT1`, u32 little-endian header length, UTF-8 JSON
//! header `{"dims":[n,c,h,w],"dtype":"f32le"}`, then `n·c·h·w` little-endian
//! f32 values in frame-major order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, path_err, Error, Result};
use crate::latent::{Dims, LatentClip};

pub const MAGIC: &[u8; 8] = b"CONOLAT1";
const MAX_HEADER_LEN: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatHeader {
    pub dims: Dims,
    pub dtype: String,
}

pub fn encode(clip: &LatentClip) -> Vec<u8> {
    let header = serde_json::to_vec(&LatHeader {
        dims: clip.dims(),
        dtype: "f32le".into(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + clip.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in clip.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_header(r: &mut impl Read) -> Result<LatHeader> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("not a .lat file: bad magic"));
    }
    let mut len = [0u8; 4];
    read_exact(r, &mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_HEADER_LEN {
        return Err(invalid(format!(".lat header length {len} out of range")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    let header: LatHeader = serde_json::from_slice(&buf)?;
    if header.dtype != "f32le" {
        return Err(invalid(format!("unsupported dtype {:?}", header.dtype)));
    }
    Ok(header)
}

pub fn decode(mut bytes: &[u8]) -> Result<LatentClip> {
    let header = read_header(&mut bytes)?;
    let expected = header.dims.len() * 4;
    if bytes.len() != expected {
        return Err(invalid(format!(
            ".lat payload is {} bytes, expected {expected} for {}",
            bytes.len(),
            header.dims
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    LatentClip::new(header.dims, data)
}

pub fn write(path: &Path, clip: &LatentClip) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| path_err(path, e))?;
    f.write_all(&encode(clip)).map_err(|e| path_err(path, e))
}

pub fn read(path: &Path) -> Result<LatentClip> {
    let bytes = std::fs::read(path).map_err(|e| path_err(path, e))?;
    decode(&bytes)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => invalid("truncated .lat data"),
        _ => Error::Io {
            context: "reading .lat".into(),
            source: e,
        },
    })
}
