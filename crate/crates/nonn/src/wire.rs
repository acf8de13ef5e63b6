//! Length-prefixed frames: `"NNRT" | u8 type | u32 payload_len (LE) | payload`.
//!
//! Payload layouts:
//!
//! | type            | payload                                                   |
//! |-----------------|-----------------------------------------------------------|
//! | HELLO           | request: `u32 version`, plus `u32 device_id` between split peers; reply: `u32 version, u32 output_width, u32 c, u32 h, u32 w` |
//! | LOAD_PROGRAM    | `u32 manifest_len`, manifest JSON, weight blob            |
//! | INFER_REQ       | `u32 image_id`, `f32[c·h·w]`                              |
//! | INFER_RESP      | `f32[output_width]`                                       |
//! | LAYER_EXCHANGE  | `f32[slice]`                                              |
//! | SHUTDOWN        | empty                                                     |
//! | ERROR           | `u32 code`, UTF-8 message                                 |
//!
//! Responses and exchanges carry no ids: each connection processes requests
//! in order, so position identifies them.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"NNRT";
pub const HEADER_LEN: usize = 9;
pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on accepted payloads.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    LoadProgram = 2,
    InferReq = 3,
    InferResp = 4,
    LayerExchange = 5,
    Shutdown = 6,
    Error = 7,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::Hello,
            2 => Self::LoadProgram,
            3 => Self::InferReq,
            4 => Self::InferResp,
            5 => Self::LayerExchange,
            6 => Self::Shutdown,
            7 => Self::Error,
            _ => return None,
        })
    }
}

pub mod error_code {
    pub const UNKNOWN_TYPE: u32 = 1;
    pub const BAD_PAYLOAD: u32 = 2;
    pub const NO_PROGRAM: u32 = 3;
    pub const INFERENCE: u32 = 4;
    pub const UNEXPECTED: u32 = 5;
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad frame magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("payload of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed {what} payload: {reason}")]
    Payload { what: &'static str, reason: String },
    #[error("peer reported error {code}: {message}")]
    Remote { code: u32, message: String },
    #[error("expected message type {expected}, got {got}")]
    Unexpected { expected: u8, got: u8 },
}

impl WireError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, WireError::Io(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
    }
}

/// A frame with a possibly unknown type byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(t: MsgType, payload: Vec<u8>) -> Self {
        Self { msg_type: t as u8, payload }
    }

    pub fn kind(&self) -> Option<MsgType> {
        MsgType::from_u8(self.msg_type)
    }

    /// Bytes on the wire.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(MAGIC);
        out.push(self.msg_type);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Turns an ERROR frame into `Err`, and anything other than `expected` into
    /// `Unexpected`.
    pub fn expect(self, expected: MsgType) -> Result<Vec<u8>, WireError> {
        if self.msg_type == expected as u8 {
            return Ok(self.payload);
        }
        if self.kind() == Some(MsgType::Error) {
            let (code, message) = decode_error(&self.payload)?;
            return Err(WireError::Remote { code, message });
        }
        Err(WireError::Unexpected { expected: expected as u8, got: self.msg_type })
    }
}

/// Writes one frame and returns its wire length.
pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<usize, WireError> {
    let bytes = frame.encode();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

pub fn send<W: Write>(w: &mut W, t: MsgType, payload: Vec<u8>) -> Result<usize, WireError> {
    write_frame(w, &Frame::new(t, payload))
}

/// Reads one frame. A clean end of stream before the first header byte is
/// `Closed`.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(WireError::Closed),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let len = u32::from_le_bytes(header[5..9].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Frame { msg_type: header[4], payload })
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32s(what: &'static str, bytes: &[u8]) -> Result<Vec<f32>, WireError> {
    if bytes.len() % 4 != 0 {
        return Err(WireError::Payload { what, reason: format!("{} bytes is not a whole number of f32", bytes.len()) });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

fn u32_at(what: &'static str, bytes: &[u8], at: usize) -> Result<u32, WireError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| WireError::Payload { what, reason: format!("truncated at byte {at}") })
}

/// Worker self-description sent in reply to HELLO and LOAD_PROGRAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HelloReply {
    pub version: u32,
    pub output_width: u32,
    pub input: [u32; 3],
}

pub fn encode_hello_request() -> Vec<u8> {
    PROTOCOL_VERSION.to_le_bytes().to_vec()
}

pub fn encode_hello_reply(h: &HelloReply) -> Vec<u8> {
    let mut out = Vec::with_capacity(20);
    for v in [h.version, h.output_width, h.input[0], h.input[1], h.input[2]] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_hello_reply(bytes: &[u8]) -> Result<HelloReply, WireError> {
    if bytes.len() != 20 {
        return Err(WireError::Payload { what: "HELLO", reason: format!("expected 20 bytes, got {}", bytes.len()) });
    }
    let v = |i: usize| u32_at("HELLO", bytes, 4 * i);
    Ok(HelloReply { version: v(0)?, output_width: v(1)?, input: [v(2)?, v(3)?, v(4)?] })
}

pub fn encode_infer_request(image_id: u32, pixels: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * pixels.len());
    out.extend_from_slice(&image_id.to_le_bytes());
    out.extend_from_slice(&f32s_to_bytes(pixels));
    out
}

pub fn decode_infer_request(bytes: &[u8]) -> Result<(u32, Vec<f32>), WireError> {
    let id = u32_at("INFER_REQ", bytes, 0)?;
    Ok((id, bytes_to_f32s("INFER_REQ", &bytes[4..])?))
}

pub fn encode_load_program(manifest_json: &[u8], blob: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + manifest_json.len() + blob.len());
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest_json);
    out.extend_from_slice(blob);
    out
}

pub fn decode_load_program(bytes: &[u8]) -> Result<(&[u8], &[u8]), WireError> {
    let n = u32_at("LOAD_PROGRAM", bytes, 0)? as usize;
    let end = 4usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| WireError::Payload {
        what: "LOAD_PROGRAM",
        reason: format!("manifest length {n} exceeds payload"),
    })?;
    Ok((&bytes[4..end], &bytes[end..]))
}

pub fn encode_error(code: u32, message: &str) -> Vec<u8> {
    let mut out = code.to_le_bytes().to_vec();
    out.extend_from_slice(message.as_bytes());
    out
}

pub fn decode_error(bytes: &[u8]) -> Result<(u32, String), WireError> {
    let code = u32_at("ERROR", bytes, 0)?;
    Ok((code, String::from_utf8_lossy(&bytes[4..]).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip_and_length() {
        let f = Frame::new(MsgType::InferResp, f32s_to_bytes(&[1.0, -2.5]));
        let bytes = f.encode();
        assert_eq!(bytes.len(), 9 + 8);
        assert_eq!(&bytes[..4], b"NNRT");
        assert_eq!(bytes[4], 4);
        assert_eq!(&bytes[5..9], &8u32.to_le_bytes());
        let back = read_frame(&mut &bytes[..]).unwrap();
        assert_eq!(back, f);
        assert_eq!(bytes_to_f32s("t", &back.payload).unwrap(), vec![1.0, -2.5]);
    }

    #[test]
    fn unknown_type_still_parses() {
        let f = Frame { msg_type: 42, payload: vec![1, 2, 3] };
        let back = read_frame(&mut &f.encode()[..]).unwrap();
        assert_eq!(back.kind(), None);
        assert_eq!(back.payload, vec![1, 2, 3]);
    }

    #[test]
    fn bad_magic_and_eof() {
        let mut bytes = Frame::new(MsgType::Shutdown, vec![]).encode();
        bytes[0] = b'X';
        assert!(matches!(read_frame(&mut &bytes[..]), Err(WireError::BadMagic(_))));
        assert!(matches!(read_frame(&mut &[][..]), Err(WireError::Closed)));
        let bytes = Frame::new(MsgType::InferResp, vec![0; 8]).encode();
        assert!(matches!(read_frame(&mut &bytes[..12]), Err(WireError::Io(_))));
    }

    #[test]
    fn error_frames_surface_as_remote() {
        let f = Frame::new(MsgType::Error, encode_error(3, "no program"));
        match f.expect(MsgType::InferResp) {
            Err(WireError::Remote { code: 3, message }) => assert_eq!(message, "no program"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn payload_codecs() {
        let h = HelloReply { version: 1, output_width: 34, input: [3, 32, 32] };
        assert_eq!(decode_hello_reply(&encode_hello_reply(&h)).unwrap(), h);
        let (id, px) = decode_infer_request(&encode_infer_request(7, &[0.5, 1.5])).unwrap();
        assert_eq!((id, px), (7, vec![0.5, 1.5]));
        let p = encode_load_program(b"{}", &[9, 9]);
        assert_eq!(decode_load_program(&p).unwrap(), (&b"{}"[..], &[9u8, 9][..]));
        assert!(decode_load_program(&[5, 0, 0, 0, 1]).is_err());
    }
}
