//! Station command set and the station-side state machine.
//!
//! Every response carries `cmd | 0x80` and a payload starting with
//! `[status, flags]`; flag bit 0 means another response frame follows.

use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;

use super::frame::{Frame, MAX_PAYLOAD};
use super::ring::{EventKind, EventRecord, EventRing, EVENT_WIRE_LEN};
use crate::rf::{ReaderId, RfError, Uid, World};

pub const RESPONSE_FLAG: u8 = 0x80;
pub const FLAG_MORE: u8 = 0x01;
pub const FIRMWARE_VERSION: (u8, u8) = (1, 0);
pub const DEFAULT_PASSWORD: [u8; 4] = [0, 0, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Command {
    Ping = 0x01,
    SetAddr = 0x02,
    SetBaud = 0x03,
    SetPassword = 0x04,
    Inventory = 0x10,
    ReadTag = 0x11,
    WriteTag = 0x12,
    GetEvents = 0x20,
    ClearEvents = 0x21,
}

impl Command {
    pub fn from_code(code: u8) -> Option<Self> {
        use Command::*;
        [Ping, SetAddr, SetBaud, SetPassword, Inventory, ReadTag, WriteTag, GetEvents, ClearEvents]
            .into_iter()
            .find(|c| *c as u8 == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    AuthFailed = 1,
    UnknownCommand = 2,
    BadRequest = 3,
    TagNotFound = 4,
    BlockOutOfRange = 5,
    BlockLocked = 6,
    UnknownReader = 7,
}

impl Status {
    pub fn from_code(code: u8) -> Option<Self> {
        use Status::*;
        [Ok, AuthFailed, UnknownCommand, BadRequest, TagNotFound, BlockOutOfRange, BlockLocked, UnknownReader]
            .into_iter()
            .find(|s| *s as u8 == code)
    }
}

impl From<&RfError> for Status {
    fn from(e: &RfError) -> Self {
        match e {
            RfError::TagNotFound(_) => Status::TagNotFound,
            RfError::BlockOutOfRange { .. } => Status::BlockOutOfRange,
            RfError::BlockLocked(_) => Status::BlockLocked,
            RfError::UnknownReader(_) => Status::UnknownReader,
            _ => Status::BadRequest,
        }
    }
}

/// Stored line-rate code. Configuration only; it has no timing effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum BaudClass {
    B9600,
    #[default]
    B19200,
    B38400,
    B57600,
    B115200,
}

impl BaudClass {
    pub const ALL: [BaudClass; 5] =
        [BaudClass::B9600, BaudClass::B19200, BaudClass::B38400, BaudClass::B57600, BaudClass::B115200];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn rate(self) -> u32 {
        [9600, 19200, 38400, 57600, 115200][self as usize]
    }

    pub fn from_rate(rate: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.rate() == rate)
    }
}

/// Largest block payload a READ_TAG response can carry (status, flags,
/// block_size, count, data).
pub const READ_DATA_MAX: usize = MAX_PAYLOAD - 4;
/// Largest block payload a WRITE_TAG request can carry (password, uid,
/// first, count, block_size, data).
pub const WRITE_DATA_MAX: usize = MAX_PAYLOAD - 15;
const EVENTS_PER_FRAME: usize = (MAX_PAYLOAD - 3) / EVENT_WIRE_LEN;
const UIDS_FIRST_FRAME: usize = (MAX_PAYLOAD - 10) / 8;
const UIDS_PER_FRAME: usize = (MAX_PAYLOAD - 2) / 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Station {
    pub addr: u8,
    pub name: String,
    pub baud: BaudClass,
    password: [u8; 4],
    /// Antenna this station drives in the simulation world.
    pub reader: ReaderId,
    ring: EventRing,
    seq: u32,
}

impl Station {
    pub fn new(addr: u8, name: impl Into<String>, reader: ReaderId) -> Self {
        Station {
            addr,
            name: name.into(),
            baud: BaudClass::default(),
            password: DEFAULT_PASSWORD,
            reader,
            ring: EventRing::default(),
            seq: 0,
        }
    }

    pub fn with_password(mut self, password: [u8; 4]) -> Self {
        self.password = password;
        self
    }

    pub fn ring(&self) -> &EventRing {
        &self.ring
    }

    pub fn last_seq(&self) -> u32 {
        self.seq
    }

    pub fn password_matches(&self, candidate: &[u8]) -> bool {
        candidate.len() == 4 && bool::from(self.password.ct_eq(candidate))
    }

    /// Journals an occurrence. Crossing the 90% ring mark journals one
    /// BUFFER_OVERRUN_WARNING right after it.
    pub fn record(&mut self, kind: EventKind, uid: Option<Uid>, at_us: u64) -> u32 {
        self.seq += 1;
        let rec = EventRecord { seq: self.seq, station: self.addr, kind, uid, sim_timestamp_us: at_us };
        if self.ring.push(rec).crossed_threshold {
            self.seq += 1;
            self.ring.push(EventRecord {
                seq: self.seq,
                station: self.addr,
                kind: EventKind::BufferOverrunWarning,
                uid: None,
                sim_timestamp_us: at_us,
            });
        }
        self.seq
    }

    fn reply(&self, request: &Frame, status: Status, more: bool, body: &[u8]) -> Frame {
        let mut payload = Vec::with_capacity(2 + body.len());
        payload.push(status as u8);
        payload.push(if more { FLAG_MORE } else { 0 });
        payload.extend_from_slice(body);
        Frame { addr: request.addr, cmd: request.cmd | RESPONSE_FLAG, payload }
    }

    /// Executes one command. Broadcast requests are executed but never
    /// answered.
    pub fn dispatch(&mut self, frame: &Frame, world: &mut World) -> Vec<Frame> {
        let responses = self.execute(frame, world);
        if frame.is_broadcast() {
            Vec::new()
        } else {
            responses
        }
    }

    fn execute(&mut self, frame: &Frame, world: &mut World) -> Vec<Frame> {
        let p = frame.payload.as_slice();
        let Some(cmd) = Command::from_code(frame.cmd) else {
            return vec![self.reply(frame, Status::UnknownCommand, false, &[])];
        };
        let bad = |s: &Self| vec![s.reply(frame, Status::BadRequest, false, &[])];
        let now = world.clock_us();

        let protected = matches!(
            cmd,
            Command::SetAddr | Command::SetBaud | Command::SetPassword | Command::WriteTag | Command::ClearEvents
        );
        if protected {
            if p.len() < 4 {
                return bad(self);
            }
            if !self.password_matches(&p[..4]) {
                return vec![self.reply(frame, Status::AuthFailed, false, &[])];
            }
        }

        match cmd {
            Command::Ping => {
                let mut body =
                    vec![self.addr, FIRMWARE_VERSION.0, FIRMWARE_VERSION.1, self.ring.len() as u8, self.baud.code()];
                body.extend_from_slice(&self.seq.to_le_bytes());
                vec![self.reply(frame, Status::Ok, false, &body)]
            }
            Command::SetAddr => {
                let [_, _, _, _, new_addr] = p else {
                    return bad(self);
                };
                if *new_addr > super::frame::MAX_STATION_ADDR {
                    return bad(self);
                }
                let reply = self.reply(frame, Status::Ok, false, &[]);
                self.addr = *new_addr;
                self.record(EventKind::ConfigChange, None, now);
                vec![reply]
            }
            Command::SetBaud => {
                let Some(baud) = p.get(4).and_then(|&c| BaudClass::from_code(c)) else {
                    return bad(self);
                };
                if p.len() != 5 {
                    return bad(self);
                }
                self.baud = baud;
                self.record(EventKind::ConfigChange, None, now);
                vec![self.reply(frame, Status::Ok, false, &[])]
            }
            Command::SetPassword => {
                if p.len() != 8 {
                    return bad(self);
                }
                self.password.copy_from_slice(&p[4..8]);
                self.record(EventKind::ConfigChange, None, now);
                vec![self.reply(frame, Status::Ok, false, &[])]
            }
            Command::Inventory => match world.inventory(self.reader) {
                Err(e) => vec![self.reply(frame, Status::from(&e), false, &[])],
                Ok(inv) => {
                    let mut head = vec![inv.uids.len() as u8];
                    head.extend_from_slice(&(inv.rounds as u16).to_le_bytes());
                    head.extend_from_slice(&(inv.duration_us as u32).to_le_bytes());
                    head.push(inv.truncated as u8);
                    let first = inv.uids.len().min(UIDS_FIRST_FRAME);
                    let mut chunks = vec![&inv.uids[..first]];
                    chunks.extend(inv.uids[first..].chunks(UIDS_PER_FRAME));
                    let last = chunks.len() - 1;
                    chunks
                        .into_iter()
                        .enumerate()
                        .map(|(i, uids)| {
                            let mut body = if i == 0 { head.clone() } else { Vec::new() };
                            for uid in uids {
                                body.extend_from_slice(&uid.bytes());
                            }
                            self.reply(frame, Status::Ok, i < last, &body)
                        })
                        .collect()
                }
            },
            Command::ReadTag => {
                if p.len() != 10 {
                    return bad(self);
                }
                let Ok(uid) = Uid::new(p[..8].try_into().unwrap()) else {
                    return bad(self);
                };
                let (first, count) = (p[8] as usize, p[9] as usize);
                match world.read_blocks(self.reader, uid, first, count) {
                    Err(e) => vec![self.reply(frame, Status::from(&e), false, &[])],
                    Ok(blocks) => {
                        let block_size = blocks.first().map_or(0, Vec::len);
                        if block_size * count > READ_DATA_MAX {
                            return bad(self);
                        }
                        let mut body = vec![block_size as u8, count as u8];
                        body.extend(blocks.concat());
                        vec![self.reply(frame, Status::Ok, false, &body)]
                    }
                }
            }
            Command::WriteTag => {
                if p.len() < 15 {
                    return bad(self);
                }
                let Ok(uid) = Uid::new(p[4..12].try_into().unwrap()) else {
                    return bad(self);
                };
                let (first, count, block_size) = (p[12] as usize, p[13] as usize, p[14] as usize);
                let data = &p[15..];
                if block_size == 0 || data.len() != count * block_size {
                    return bad(self);
                }
                let images: Vec<Vec<u8>> = data.chunks(block_size).map(<[u8]>::to_vec).collect();
                match world.write_blocks(self.reader, uid, first, &images) {
                    Err(e) => vec![self.reply(frame, Status::from(&e), false, &[])],
                    Ok(()) => vec![self.reply(frame, Status::Ok, false, &[])],
                }
            }
            Command::GetEvents => {
                if p.len() != 5 {
                    return bad(self);
                }
                let after = u32::from_le_bytes(p[..4].try_into().unwrap());
                let max = match p[4] as usize {
                    0 => EVENTS_PER_FRAME,
                    n => n.min(EVENTS_PER_FRAME),
                };
                self.ring.acknowledge(after);
                let pending: Vec<&EventRecord> = self.ring.read(after).collect();
                let batch = &pending[..pending.len().min(max)];
                let mut body = vec![batch.len() as u8];
                for rec in batch {
                    rec.to_wire(&mut body);
                }
                let more = pending.len() > batch.len();
                vec![self.reply(frame, Status::Ok, more, &body)]
            }
            Command::ClearEvents => {
                if p.len() != 4 {
                    return bad(self);
                }
                self.ring.clear();
                vec![self.reply(frame, Status::Ok, false, &[])]
            }
        }
    }
}
