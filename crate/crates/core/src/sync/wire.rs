//! Sync link messages.
//!
//! Every message is framed as (integers little-endian):
//!
//! ```text
//! u32 length of everything after this field
//! u8  kind
//! u32 header length
//! header: JSON object
//! data:   raw bytes (compact table body or file contents), may be empty
//! ```

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SyncError;

/// Largest accepted message, to bound allocation on a corrupt length.
pub const MAX_MESSAGE_LEN: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Kind {
    GetManifest = 0x01,
    Manifest = 0x02,
    PutTable = 0x03,
    GetTable = 0x04,
    Table = 0x05,
    SetRevision = 0x06,
    Ack = 0x07,
    Done = 0x08,
    FilePut = 0x10,
    FileGet = 0x11,
    FileData = 0x12,
    FileDelete = 0x13,
    MakeDir = 0x14,
    RemoveDir = 0x15,
    Stat = 0x16,
    StatReply = 0x17,
}

impl Kind {
    const ALL: [Kind; 16] = [
        Kind::GetManifest,
        Kind::Manifest,
        Kind::PutTable,
        Kind::GetTable,
        Kind::Table,
        Kind::SetRevision,
        Kind::Ack,
        Kind::Done,
        Kind::FilePut,
        Kind::FileGet,
        Kind::FileData,
        Kind::FileDelete,
        Kind::MakeDir,
        Kind::RemoveDir,
        Kind::Stat,
        Kind::StatReply,
    ];

    pub fn from_code(code: u8) -> Option<Kind> {
        Self::ALL.into_iter().find(|k| *k as u8 == code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: Kind,
    pub header: Vec<u8>,
    pub data: Vec<u8>,
}

impl Message {
    pub fn new<H: Serialize>(kind: Kind, header: &H) -> Self {
        Message { kind, header: serde_json::to_vec(header).expect("header serializes"), data: Vec::new() }
    }

    pub fn with_data(mut self, data: Vec<u8>) -> Self {
        self.data = data;
        self
    }

    pub fn header<H: DeserializeOwned>(&self) -> Result<H, SyncError> {
        serde_json::from_slice(&self.header).map_err(|e| SyncError::Protocol(format!("{:?} header: {e}", self.kind)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let len = 1 + 4 + self.header.len() + self.data.len();
        let mut out = Vec::with_capacity(4 + len);
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.header);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn encoded_len(&self) -> usize {
        4 + 1 + 4 + self.header.len() + self.data.len()
    }

    /// Parses one message from the front of `buf`. `Ok(None)` means more
    /// bytes are needed.
    pub fn parse(buf: &[u8]) -> Result<Option<(Message, usize)>, SyncError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        if !(5..=MAX_MESSAGE_LEN).contains(&len) {
            return Err(SyncError::Protocol(format!("bad message length {len}")));
        }
        if buf.len() < 4 + len {
            return Ok(None);
        }
        let body = &buf[4..4 + len];
        let kind = Kind::from_code(body[0]).ok_or_else(|| SyncError::Protocol(format!("unknown kind {}", body[0])))?;
        let hlen = u32::from_le_bytes(body[1..5].try_into().unwrap()) as usize;
        if hlen > len - 5 {
            return Err(SyncError::Protocol("header overruns message".into()));
        }
        let header = body[5..5 + hlen].to_vec();
        let data = body[5 + hlen..].to_vec();
        Ok(Some((Message { kind, header, data }, 4 + len)))
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

pub fn read_message<R: Read>(r: &mut R) -> io::Result<Message> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let n = u32::from_le_bytes(len) as usize;
    if !(5..=MAX_MESSAGE_LEN).contains(&n) {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad message length {n}")));
    }
    let mut buf = vec![0u8; 4 + n];
    buf[..4].copy_from_slice(&len);
    r.read_exact(&mut buf[4..])?;
    match Message::parse(&buf) {
        Ok(Some((m, _))) => Ok(m),
        Ok(None) => unreachable!("buffer holds the whole message"),
        Err(e) => Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string())),
    }
}

/// Running SHA-256 over every message both sides exchanged in a session.
#[derive(Clone, Default)]
pub struct SessionDigest(Sha256);

impl std::fmt::Debug for SessionDigest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SessionDigest({})", self.hex())
    }
}

impl SessionDigest {
    pub fn update(&mut self, msg: &Message) {
        self.0.update(msg.encode());
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GetManifest {
    pub tables: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceTableState {
    pub name: String,
    pub present: bool,
    pub revision: u64,
    pub base_revision: u64,
    pub modified_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestReply {
    pub device_id: String,
    pub tables: Vec<DeviceTableState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableName {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetRevision {
    pub name: String,
    pub revision: u64,
    pub base_revision: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckCode {
    Ok,
    Created,
    AlreadyExists,
    Removed,
    Absent,
    NotFound,
    QuotaExceeded,
    DigestMismatch,
    BadRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub code: AckCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Ack {
    pub fn ok() -> Self {
        Ack { code: AckCode::Ok, detail: None }
    }

    pub fn code(code: AckCode) -> Self {
        Ack { code, detail: None }
    }

    pub fn fail(code: AckCode, detail: impl Into<String>) -> Self {
        Ack { code, detail: Some(detail.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Done {
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHeader {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileStat {
    pub path: String,
    pub exists: bool,
    pub is_dir: bool,
    pub size: u64,
    /// Seconds since the Unix epoch.
    pub modified: u64,
}
