//! Central side of the device connection: link lifecycle, transports, and
//! the file operations.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::device::DeviceAgent;
use super::wire::{self, Ack, AckCode, FileHeader, FileStat, Kind, Message, SessionDigest};
use super::SyncError;

pub trait Transport: Read + Write + Send {}

impl<T: Read + Write + Send> Transport for T {}

/// In-process byte pipe to a device agent. Bytes are counted in both
/// directions; with `cut_after` set the link dies once that many bytes
/// have crossed it, mid-message if need be.
pub struct PipeTransport {
    agent: Arc<Mutex<DeviceAgent>>,
    inbound: Vec<u8>,
    outbound: VecDeque<u8>,
    cut_after: Option<u64>,
    transferred: u64,
    broken: bool,
}

impl PipeTransport {
    pub fn new(agent: Arc<Mutex<DeviceAgent>>) -> Self {
        PipeTransport {
            agent,
            inbound: Vec::new(),
            outbound: VecDeque::new(),
            cut_after: None,
            transferred: 0,
            broken: false,
        }
    }

    pub fn with_cut_after(mut self, bytes: u64) -> Self {
        self.cut_after = Some(bytes);
        self
    }

    fn budget(&self) -> u64 {
        self.cut_after.map_or(u64::MAX, |c| c.saturating_sub(self.transferred))
    }

    fn broken_pipe() -> io::Error {
        io::Error::new(io::ErrorKind::BrokenPipe, "link cut")
    }
}

impl Write for PipeTransport {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.broken {
            return Err(Self::broken_pipe());
        }
        let take = (buf.len() as u64).min(self.budget()) as usize;
        self.inbound.extend_from_slice(&buf[..take]);
        self.transferred += take as u64;
        loop {
            match Message::parse(&self.inbound) {
                Ok(Some((msg, used))) => {
                    self.inbound.drain(..used);
                    let reply = self.agent.lock().expect("agent lock").handle(&msg);
                    self.outbound.extend(reply.encode());
                }
                Ok(None) => break,
                Err(e) => {
                    self.broken = true;
                    return Err(io::Error::new(io::ErrorKind::InvalidData, e.to_string()));
                }
            }
        }
        if take < buf.len() {
            self.broken = true;
            if take == 0 {
                return Err(Self::broken_pipe());
            }
        }
        Ok(take)
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for PipeTransport {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.broken && self.budget() == 0 {
            return Err(Self::broken_pipe());
        }
        let take = buf.len().min(self.outbound.len()).min(self.budget().min(usize::MAX as u64) as usize);
        if take == 0 {
            if self.budget() == 0 {
                self.broken = true;
                return Err(Self::broken_pipe());
            }
            return Err(io::Error::new(io::ErrorKind::TimedOut, "no reply from device"));
        }
        for (dst, src) in buf.iter_mut().zip(self.outbound.drain(..take)) {
            *dst = src;
        }
        self.transferred += take as u64;
        Ok(take)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LinkState {
    Disconnected,
    Connected,
    Faulted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FolderOutcome {
    Created,
    AlreadyExists,
    Removed,
    Absent,
}

pub type Connector = Box<dyn FnMut() -> io::Result<Box<dyn Transport>> + Send>;

pub struct DeviceLink {
    device_id: String,
    state: LinkState,
    connector: Connector,
    transport: Option<Box<dyn Transport>>,
    bytes_sent: u64,
    bytes_received: u64,
    pub(crate) digest: Option<SessionDigest>,
}

impl std::fmt::Debug for DeviceLink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceLink").field("device_id", &self.device_id).field("state", &self.state).finish()
    }
}

impl DeviceLink {
    pub fn new(device_id: &str, connector: Connector) -> Self {
        DeviceLink {
            device_id: device_id.to_string(),
            state: LinkState::Disconnected,
            connector,
            transport: None,
            bytes_sent: 0,
            bytes_received: 0,
            digest: None,
        }
    }

    /// A link to an in-process device agent.
    pub fn in_process(agent: Arc<Mutex<DeviceAgent>>) -> Self {
        let id = agent.lock().expect("agent lock").device_id().to_string();
        DeviceLink::new(&id, Box::new(move || Ok(Box::new(PipeTransport::new(agent.clone())) as Box<dyn Transport>)))
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn state(&self) -> LinkState {
        self.state
    }

    /// Idempotent when already connected.
    pub fn connect(&mut self) -> Result<(), SyncError> {
        if self.state == LinkState::Connected {
            return Ok(());
        }
        match (self.connector)() {
            Ok(t) => {
                self.transport = Some(t);
                self.state = LinkState::Connected;
                Ok(())
            }
            Err(_) => {
                self.transport = None;
                self.state = LinkState::Faulted;
                Err(SyncError::DeviceUnreachable(self.device_id.clone()))
            }
        }
    }

    pub fn disconnect(&mut self) {
        self.transport = None;
        self.state = LinkState::Disconnected;
    }

    /// Total bytes written to and read from the transport.
    pub fn bytes_transferred(&self) -> u64 {
        self.bytes_sent + self.bytes_received
    }

    fn fault(&mut self) -> SyncError {
        self.transport = None;
        self.state = LinkState::Faulted;
        SyncError::DeviceUnreachable(self.device_id.clone())
    }

    /// One request/reply exchange.
    pub fn request(&mut self, msg: &Message) -> Result<Message, SyncError> {
        match self.state {
            LinkState::Connected => {}
            LinkState::Disconnected => return Err(SyncError::NotConnected),
            LinkState::Faulted => return Err(SyncError::DeviceUnreachable(self.device_id.clone())),
        }
        let transport = self.transport.as_mut().expect("connected link has a transport");
        let bytes = msg.encode();
        if transport.write_all(&bytes).and_then(|_| transport.flush()).is_err() {
            return Err(self.fault());
        }
        self.bytes_sent += bytes.len() as u64;
        let reply = match wire::read_message(transport) {
            Ok(r) => r,
            Err(_) => return Err(self.fault()),
        };
        self.bytes_received += reply.encoded_len() as u64;
        if let Some(d) = self.digest.as_mut() {
            if msg.kind != Kind::Done {
                d.update(msg);
                d.update(&reply);
            }
        }
        Ok(reply)
    }

    fn ack(&mut self, msg: &Message) -> Result<Ack, SyncError> {
        let reply = self.request(msg)?;
        if reply.kind != Kind::Ack {
            return Err(SyncError::Protocol(format!("expected Ack, got {:?}", reply.kind)));
        }
        reply.header()
    }

    pub fn put_file(&mut self, path: &str, data: &[u8]) -> Result<(), SyncError> {
        let header = FileHeader { path: path.to_string(), sha256: Some(wire::sha256_hex(data)) };
        let ack = self.ack(&Message::new(Kind::FilePut, &header).with_data(data.to_vec()))?;
        match ack.code {
            AckCode::Ok => Ok(()),
            AckCode::QuotaExceeded => Err(SyncError::QuotaExceeded(ack.detail.unwrap_or_default())),
            AckCode::DigestMismatch => Err(SyncError::DigestMismatch),
            _ => Err(SyncError::Protocol(ack.detail.unwrap_or_else(|| format!("{:?}", ack.code)))),
        }
    }

    /// Fetches a file and checks it against the digest the device sent.
    pub fn get_file(&mut self, path: &str) -> Result<Vec<u8>, SyncError> {
        let reply = self.request(&Message::new(Kind::FileGet, &FileHeader { path: path.to_string(), sha256: None }))?;
        match reply.kind {
            Kind::FileData => {
                let header: FileHeader = reply.header()?;
                if header.sha256.as_deref() != Some(wire::sha256_hex(&reply.data).as_str()) {
                    return Err(SyncError::DigestMismatch);
                }
                Ok(reply.data)
            }
            Kind::Ack => Err(SyncError::NotFound(path.to_string())),
            k => Err(SyncError::Protocol(format!("unexpected {k:?}"))),
        }
    }

    pub fn delete_file(&mut self, path: &str) -> Result<(), SyncError> {
        let ack = self.ack(&Message::new(Kind::FileDelete, &FileHeader { path: path.to_string(), sha256: None }))?;
        match ack.code {
            AckCode::Ok => Ok(()),
            _ => Err(SyncError::NotFound(path.to_string())),
        }
    }

    fn folder_op(&mut self, kind: Kind, path: &str) -> Result<FolderOutcome, SyncError> {
        let ack = self.ack(&Message::new(kind, &FileHeader { path: path.to_string(), sha256: None }))?;
        Ok(match ack.code {
            AckCode::Created => FolderOutcome::Created,
            AckCode::AlreadyExists => FolderOutcome::AlreadyExists,
            AckCode::Removed => FolderOutcome::Removed,
            AckCode::Absent => FolderOutcome::Absent,
            _ => return Err(SyncError::Protocol(ack.detail.unwrap_or_else(|| format!("{:?}", ack.code)))),
        })
    }

    pub fn create_folder(&mut self, path: &str) -> Result<FolderOutcome, SyncError> {
        self.folder_op(Kind::MakeDir, path)
    }

    pub fn delete_folder(&mut self, path: &str) -> Result<FolderOutcome, SyncError> {
        self.folder_op(Kind::RemoveDir, path)
    }

    pub fn stat(&mut self, path: &str) -> Result<FileStat, SyncError> {
        let reply = self.request(&Message::new(Kind::Stat, &FileHeader { path: path.to_string(), sha256: None }))?;
        if reply.kind != Kind::StatReply {
            return Err(SyncError::Protocol(format!("unexpected {:?}", reply.kind)));
        }
        let stat: FileStat = reply.header()?;
        if !stat.exists {
            return Err(SyncError::NotFound(path.to_string()));
        }
        Ok(stat)
    }
}
