//! Binary framing of backend calls.
//!
//! Frame: `"MX4Z"`, version `u16`, opcode `u16`, payload length `u64`, then
//! the payload. The payload is a `u32` tensor count, the tensors, and a
//! `u32`-length-prefixed UTF-8 JSON metadata blob. A tensor is
//! `[rank u8][dims u32 × rank][dtype u8][data]` with dtype 0 (f32). All
//! integers and floats are little-endian; data is row-major.

use std::io::{Read, Write};

use serde_json::Value;

use crate::error::{Result, TryOnError};
use crate::tensor::Tensor3;

pub const MAGIC: [u8; 4] = *b"MX4Z";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const DTYPE_F32: u8 = 0;
/// Largest payload a reader accepts.
pub const MAX_PAYLOAD: u64 = 1 << 30;

/// Error codes carried by [`Opcode::Error`] replies.
pub mod codes {
    pub const BAD_MAGIC: u16 = 1;
    pub const BAD_VERSION: u16 = 2;
    pub const UNKNOWN_OPCODE: u16 = 3;
    pub const MALFORMED: u16 = 4;
    pub const BACKEND: u16 = 5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Opcode {
    Describe,
    Encode,
    Decode,
    PredictNoise,
    Error,
}

impl Opcode {
    pub fn code(self) -> u16 {
        match self {
            Opcode::Describe => 1,
            Opcode::Encode => 2,
            Opcode::Decode => 3,
            Opcode::PredictNoise => 4,
            Opcode::Error => 255,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            1 => Opcode::Describe,
            2 => Opcode::Encode,
            3 => Opcode::Decode,
            4 => Opcode::PredictNoise,
            255 => Opcode::Error,
            _ => return None,
        })
    }
}

/// An f32 tensor of any rank.
#[derive(Debug, Clone, PartialEq)]
pub struct WireTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl WireTensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(TryOnError::Protocol(format!("rank {} too large", dims.len())));
        }
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(TryOnError::Protocol(format!(
                "tensor dims {dims:?} imply {n} elements, got {}",
                data.len()
            )));
        }
        Ok(WireTensor { dims, data })
    }

    pub fn from_f64(dims: Vec<u32>, data: &[f64]) -> Result<Self> {
        WireTensor::new(dims, data.iter().map(|&x| x as f32).collect())
    }

    pub fn from_tensor3(t: &Tensor3) -> Result<Self> {
        let (h, w, c) = t.shape();
        WireTensor::from_f64(vec![dim(h)?, dim(w)?, dim(c)?], t.data())
    }

    pub fn to_tensor3(&self) -> Result<Tensor3> {
        match self.dims.as_slice() {
            &[h, w, c] => Tensor3::from_vec(h as usize, w as usize, c as usize, self.to_f64()),
            other => Err(TryOnError::Protocol(format!("expected a rank-3 tensor, got dims {other:?}"))),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    fn encoded_len(&self) -> usize {
        1 + 4 * self.dims.len() + 1 + 4 * self.data.len()
    }
}

pub(crate) fn dim(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| TryOnError::Protocol(format!("dimension {n} exceeds u32")))
}

fn element_count(dims: &[u32]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).ok_or_else(|| {
        TryOnError::Protocol(format!("tensor dims {dims:?} overflow"))
    })
}

/// A decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub opcode: Opcode,
    pub tensors: Vec<WireTensor>,
    pub metadata: Value,
}

impl Message {
    pub fn new(opcode: Opcode, tensors: Vec<WireTensor>, metadata: Value) -> Self {
        Message { opcode, tensors, metadata }
    }

    pub fn error(code: u16, message: impl Into<String>) -> Self {
        Message::new(
            Opcode::Error,
            Vec::new(),
            serde_json::json!({ "code": code, "message": message.into() }),
        )
    }

    /// `Remote` error if this is an error reply.
    pub fn into_result(self) -> Result<Message> {
        if self.opcode != Opcode::Error {
            return Ok(self);
        }
        let code = self.metadata.get("code").and_then(Value::as_u64).unwrap_or(0) as u16;
        let message = self
            .metadata
            .get("message")
            .and_then(Value::as_str)
            .unwrap_or("unspecified")
            .to_string();
        Err(TryOnError::Remote { code, message })
    }
}

/// Encodes the payload (tensors and metadata) of a message.
pub fn encode_payload(tensors: &[WireTensor], metadata: &Value) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(metadata).map_err(|e| TryOnError::Protocol(e.to_string()))?;
    let meta_len = u32::try_from(meta.len()).map_err(|_| TryOnError::Protocol("metadata too large".into()))?;
    let count = u32::try_from(tensors.len()).map_err(|_| TryOnError::Protocol("too many tensors".into()))?;
    let size = 4 + tensors.iter().map(WireTensor::encoded_len).sum::<usize>() + 4 + meta.len();
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        out.push(t.dims.len() as u8);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TryOnError::Protocol("payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_payload(payload: &[u8]) -> Result<(Vec<WireTensor>, Value)> {
    let mut cur = Cursor { buf: payload, pos: 0 };
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rank = cur.u8()? as usize;
        let dims: Vec<u32> = (0..rank).map(|_| cur.u32()).collect::<Result<_>>()?;
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(TryOnError::Protocol(format!("unsupported dtype {dtype}")));
        }
        let n = element_count(&dims)?;
        let bytes = cur.take(n.checked_mul(4).ok_or_else(|| TryOnError::Protocol("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(WireTensor { dims, data });
    }
    let meta_len = cur.u32()? as usize;
    let meta = cur.take(meta_len)?;
    if cur.pos != payload.len() {
        return Err(TryOnError::Protocol(format!(
            "{} trailing bytes after metadata",
            payload.len() - cur.pos
        )));
    }
    let metadata = if meta.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(meta).map_err(|e| TryOnError::Protocol(format!("bad metadata: {e}")))?
    };
    Ok((tensors, metadata))
}

/// Header fields as read, before any validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawHeader {
    pub magic: [u8; 4],
    pub version: u16,
    pub opcode: u16,
    pub payload_len: u64,
}

impl RawHeader {
    pub fn parse(bytes: &[u8; HEADER_LEN]) -> Self {
        RawHeader {
            magic: bytes[0..4].try_into().unwrap(),
            version: u16::from_le_bytes([bytes[4], bytes[5]]),
            opcode: u16::from_le_bytes([bytes[6], bytes[7]]),
            payload_len: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
        }
    }
}

/// A frame whose payload has been read but not decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub header: RawHeader,
    pub payload: Vec<u8>,
}

impl RawFrame {
    pub fn decode(&self) -> Result<Message> {
        let h = &self.header;
        if h.magic != MAGIC {
            return Err(TryOnError::Protocol(format!("bad magic {:?}", h.magic)));
        }
        if h.version != VERSION {
            return Err(TryOnError::Protocol(format!(
                "unsupported protocol version {} (expected {VERSION})",
                h.version
            )));
        }
        let opcode = Opcode::from_code(h.opcode)
            .ok_or_else(|| TryOnError::Protocol(format!("unknown opcode {}", h.opcode)))?;
        let (tensors, metadata) = decode_payload(&self.payload)?;
        Ok(Message { opcode, tensors, metadata })
    }
}

/// Reads one frame. `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<RawFrame>> {
    let mut head = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut head[filled..])? {
            0 if filled == 0 => return Ok(None),
            0 => return Err(TryOnError::Protocol("stream ended inside a frame header".into())),
            n => filled += n,
        }
    }
    let header = RawHeader::parse(&head);
    if header.payload_len > MAX_PAYLOAD {
        return Err(TryOnError::Protocol(format!(
            "payload of {} bytes exceeds the limit",
            header.payload_len
        )));
    }
    let mut payload = vec![0u8; header.payload_len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(RawFrame { header, payload }))
}

pub fn read_message(r: &mut impl Read) -> Result<Message> {
    read_frame(r)?
        .ok_or_else(|| TryOnError::Protocol("connection closed".into()))?
        .decode()
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>> {
    let payload = encode_payload(&msg.tensors, &msg.metadata)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&msg.opcode.code().to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&encode_message(msg)?)?;
    w.flush()?;
    Ok(())
}
