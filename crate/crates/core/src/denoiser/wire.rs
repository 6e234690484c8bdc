//! Framing for the predictor wire protocol.
//!
//! Every message is a u32 little-endian header length, a UTF-8 JSON header,
//! then a raw payload. `predict` and `epsilon` carry `n·c·h·w` little-endian
//! f32 values sized by their `shape`; `hello` and `error` carry none.

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_HEADER_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Header {
    Hello {
        protocol: u32,
        shape: [usize; 4],
    },
    Predict {
        t: usize,
        step_index: usize,
        prompt: String,
        cfg_scale: f64,
        shape: [usize; 4],
    },
    Epsilon {
        shape: [usize; 4],
    },
    Error {
        message: String,
    },
}

impl Header {
    pub fn op(&self) -> &'static str {
        match self {
            Header::Hello { .. } => "hello",
            Header::Predict { .. } => "predict",
            Header::Epsilon { .. } => "epsilon",
            Header::Error { .. } => "error",
        }
    }

    fn payload_len(&self) -> Option<usize> {
        match self {
            Header::Predict { shape, .. } | Header::Epsilon { shape } => {
                Some(shape.iter().product())
            }
            Header::Hello { .. } | Header::Error { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub header: Header,
    pub payload: Vec<f32>,
}

pub fn write_message(w: &mut impl Write, header: &Header, payload: &[f32]) -> Result<()> {
    let expected = header.payload_len().unwrap_or(0);
    if payload.len() != expected {
        return Err(Error::Protocol(format!(
            "{} payload has {} values, header implies {expected}",
            header.op(),
            payload.len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(4 + json.len() + payload.len() * 4);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
        .and_then(|_| w.flush())
        .map_err(|e| io_err("writing bridge message", e))
}

/// Reads one message. `Ok(None)` means the peer closed the stream cleanly
/// before a new message started.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match read_full(r, &mut len)? {
        0 => return Ok(None),
        4 => {}
        n => {
            return Err(Error::Protocol(format!(
                "stream ended inside a length prefix ({n} of 4 bytes)"
            )))
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > MAX_HEADER_LEN {
        return Err(Error::Protocol(format!("malformed header length {len}")));
    }
    let mut json = vec![0u8; len];
    expect_full(r, &mut json, "header")?;
    let text = std::str::from_utf8(&json)
        .map_err(|_| Error::Protocol("header is not valid UTF-8".into()))?;
    let header: Header = serde_json::from_str(text)
        .map_err(|e| Error::Protocol(format!("bad header {text:?}: {e}")))?;
    let payload = match header.payload_len() {
        None => Vec::new(),
        Some(n) => {
            let mut bytes = vec![0u8; n * 4];
            expect_full(r, &mut bytes, "payload")?;
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
    };
    Ok(Some(Message { header, payload }))
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(io_err("reading bridge message", e)),
        }
    }
    Ok(filled)
}

fn expect_full(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    let n = read_full(r, buf)?;
    if n != buf.len() {
        return Err(Error::Protocol(format!(
            "stream ended inside {what}: got {n} of {} bytes",
            buf.len()
        )));
    }
    Ok(())
}
