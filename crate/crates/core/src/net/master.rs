//! Bus master: station roster, acknowledged-sequence event polling, and the
//! typed command helpers the control plane uses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bus::Bus;
use super::frame::{Frame, MAX_STATION_ADDR};
use super::ring::{EventRecord, EVENT_WIRE_LEN};
use super::station::{BaudClass, Command, Status, FLAG_MORE, READ_DATA_MAX, WRITE_DATA_MAX};
use super::NetError;
use crate::codec::{HEADER_LEN, TRAILER_LEN};
use crate::rf::{InventoryResult, Uid};

pub const MAX_STATIONS: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub master_id: u8,
    /// Radio backhaul reach between master and host. Informational only.
    pub backhaul_range_m: u32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { master_id: 0, backhaul_range_m: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub name: String,
    pub password: [u8; 4],
    /// Highest event seq received and acknowledged.
    pub acked_seq: u32,
    /// Simulated time of the last successful exchange.
    pub last_contact_us: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqGap {
    pub station: u8,
    pub expected: u32,
    pub got: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollReport {
    /// Grouped by station address, ascending seq within each station.
    pub events: Vec<EventRecord>,
    pub contacted: Vec<u8>,
    pub timeouts: Vec<u8>,
    /// Seq ranges the station evicted before they could be collected.
    pub gaps: Vec<SeqGap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PingInfo {
    pub addr: u8,
    pub firmware: (u8, u8),
    pub event_count: u8,
    pub baud: BaudClass,
    pub last_seq: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Master {
    pub config: NetworkConfig,
    roster: BTreeMap<u8, RosterEntry>,
}

fn check(frame: &Frame) -> Result<(u8, &[u8]), NetError> {
    let [status, flags, body @ ..] = frame.payload.as_slice() else {
        return Err(NetError::Protocol("short response".into()));
    };
    match Status::from_code(*status) {
        Some(Status::Ok) => Ok((*flags, body)),
        Some(status) => Err(NetError::Station { addr: frame.addr, status }),
        None => Err(NetError::Protocol(format!("unknown status {status}"))),
    }
}

impl Master {
    pub fn new(config: NetworkConfig) -> Self {
        Master { config, roster: BTreeMap::new() }
    }

    pub fn register(&mut self, addr: u8, name: impl Into<String>, password: [u8; 4]) -> Result<(), NetError> {
        if addr > MAX_STATION_ADDR {
            return Err(NetError::BadAddress(addr));
        }
        if self.roster.contains_key(&addr) {
            return Err(NetError::DuplicateAddress(addr));
        }
        if self.roster.len() >= MAX_STATIONS {
            return Err(NetError::RosterFull);
        }
        self.roster.insert(addr, RosterEntry { name: name.into(), password, acked_seq: 0, last_contact_us: None });
        Ok(())
    }

    pub fn unregister(&mut self, addr: u8) -> Option<RosterEntry> {
        self.roster.remove(&addr)
    }

    pub fn roster(&self) -> &BTreeMap<u8, RosterEntry> {
        &self.roster
    }

    fn entry(&self, addr: u8) -> Result<&RosterEntry, NetError> {
        self.roster.get(&addr).ok_or(NetError::UnknownStation(addr))
    }

    fn call(&mut self, bus: &mut impl Bus, addr: u8, cmd: Command, payload: Vec<u8>) -> Result<Vec<Frame>, NetError> {
        self.entry(addr)?;
        let frames = bus.transact(&Frame::new(addr, cmd as u8, payload)?)?;
        if frames.is_empty() {
            return Err(NetError::Timeout(addr));
        }
        Ok(frames)
    }

    /// Marks a successful exchange at simulated time `at_us`.
    pub fn touch(&mut self, addr: u8, at_us: u64) {
        if let Some(e) = self.roster.get_mut(&addr) {
            e.last_contact_us = Some(at_us);
        }
    }

    /// Addresses each rostered station in turn with GET_EVENTS(last acked
    /// seq), following continuation until the station has nothing pending.
    pub fn poll_cycle(&mut self, bus: &mut impl Bus) -> PollReport {
        let mut report = PollReport::default();
        let addrs: Vec<u8> = self.roster.keys().copied().collect();
        'stations: for addr in addrs {
            loop {
                let acked = self.roster[&addr].acked_seq;
                let mut payload = acked.to_le_bytes().to_vec();
                payload.push(0);
                let frames = match self.call(bus, addr, Command::GetEvents, payload) {
                    Ok(f) => f,
                    Err(NetError::Timeout(_)) => {
                        report.timeouts.push(addr);
                        continue 'stations;
                    }
                    Err(_) => continue 'stations,
                };
                let Ok((flags, body)) = check(&frames[0]) else {
                    continue 'stations;
                };
                let count = body.first().copied().unwrap_or(0) as usize;
                let records = &body[1.min(body.len())..];
                let mut next_acked = acked;
                for chunk in records.chunks_exact(EVENT_WIRE_LEN).take(count) {
                    let Some(rec) = EventRecord::from_wire(chunk) else {
                        continue;
                    };
                    if rec.seq != next_acked + 1 {
                        report.gaps.push(SeqGap { station: addr, expected: next_acked + 1, got: rec.seq });
                    }
                    next_acked = rec.seq;
                    report.events.push(rec);
                }
                let entry = self.roster.get_mut(&addr).unwrap();
                entry.acked_seq = next_acked;
                if !report.contacted.contains(&addr) {
                    report.contacted.push(addr);
                }
                if flags & FLAG_MORE == 0 || next_acked == acked {
                    break;
                }
            }
        }
        report
    }

    pub fn ping(&mut self, bus: &mut impl Bus, addr: u8) -> Result<PingInfo, NetError> {
        let frames = self.call(bus, addr, Command::Ping, Vec::new())?;
        let (_, body) = check(&frames[0])?;
        let [a, major, minor, count, baud, s0, s1, s2, s3] = body else {
            return Err(NetError::Protocol("bad PING body".into()));
        };
        Ok(PingInfo {
            addr: *a,
            firmware: (*major, *minor),
            event_count: *count,
            baud: BaudClass::from_code(*baud).ok_or_else(|| NetError::Protocol("bad baud".into()))?,
            last_seq: u32::from_le_bytes([*s0, *s1, *s2, *s3]),
        })
    }

    pub fn inventory(&mut self, bus: &mut impl Bus, addr: u8) -> Result<InventoryResult, NetError> {
        let frames = self.call(bus, addr, Command::Inventory, Vec::new())?;
        let (_, head) = check(&frames[0])?;
        if head.len() < 8 {
            return Err(NetError::Protocol("bad INVENTORY header".into()));
        }
        let total = head[0] as usize;
        let rounds = u16::from_le_bytes([head[1], head[2]]) as u32;
        let duration_us = u32::from_le_bytes(head[3..7].try_into().unwrap()) as u64;
        let truncated = head[7] != 0;
        let mut uids = Vec::with_capacity(total);
        for (i, frame) in frames.iter().enumerate() {
            let (_, body) = check(frame)?;
            let data = if i == 0 { &body[8..] } else { body };
            for chunk in data.chunks_exact(8) {
                uids.push(Uid::new(chunk.try_into().unwrap())?);
            }
        }
        if uids.len() != total {
            return Err(NetError::Protocol(format!("expected {total} uids, got {}", uids.len())));
        }
        Ok(InventoryResult { uids, rounds, duration_us, truncated })
    }

    pub fn read_blocks(
        &mut self,
        bus: &mut impl Bus,
        addr: u8,
        uid: Uid,
        first: usize,
        count: usize,
    ) -> Result<Vec<Vec<u8>>, NetError> {
        let mut blocks = Vec::with_capacity(count);
        let mut per_call = 1usize;
        while blocks.len() < count {
            let start = first + blocks.len();
            let n = per_call.min(count - blocks.len());
            let mut payload = uid.bytes().to_vec();
            payload.extend([start as u8, n as u8]);
            let frames = self.call(bus, addr, Command::ReadTag, payload)?;
            let (_, body) = check(&frames[0])?;
            let (bs, got) = match body {
                [bs, got, ..] if *bs > 0 => (*bs as usize, *got as usize),
                _ => return Err(NetError::Protocol("bad READ_TAG body".into())),
            };
            if body.len() != 2 + bs * got || got != n {
                return Err(NetError::Protocol("READ_TAG length mismatch".into()));
            }
            blocks.extend(body[2..].chunks(bs).map(<[u8]>::to_vec));
            per_call = (READ_DATA_MAX / bs).max(1);
        }
        Ok(blocks)
    }

    /// Reads an encoded tag payload: the header block(s) first, then as many
    /// blocks as its body_length calls for.
    pub fn read_payload(&mut self, bus: &mut impl Bus, addr: u8, uid: Uid) -> Result<Vec<u8>, NetError> {
        let first = self.read_blocks(bus, addr, uid, 0, 1)?;
        let bs = first[0].len();
        let header_blocks = HEADER_LEN.div_ceil(bs);
        let mut blocks = first;
        if header_blocks > 1 {
            blocks.extend(self.read_blocks(bus, addr, uid, 1, header_blocks - 1)?);
        }
        let flat: Vec<u8> = blocks.concat();
        if flat[0] != crate::codec::MAGIC {
            return Ok(flat[..HEADER_LEN.min(flat.len())].to_vec());
        }
        let total = HEADER_LEN + u16::from_le_bytes([flat[4], flat[5]]) as usize + TRAILER_LEN;
        let total_blocks = total.div_ceil(bs);
        if total_blocks > header_blocks {
            blocks.extend(self.read_blocks(bus, addr, uid, header_blocks, total_blocks - header_blocks)?);
        }
        let mut flat = blocks.concat();
        flat.truncate(total);
        Ok(flat)
    }

    /// Writes block images in as many WRITE_TAG commands as the frame size
    /// requires. Each command is atomic on the tag; the sequence is not.
    pub fn write_blocks(
        &mut self,
        bus: &mut impl Bus,
        addr: u8,
        uid: Uid,
        first: usize,
        images: &[Vec<u8>],
    ) -> Result<(), NetError> {
        let Some(bs) = images.first().map(Vec::len) else {
            return Ok(());
        };
        if bs == 0 || images.iter().any(|b| b.len() != bs) {
            return Err(NetError::Protocol("block images must share one non-zero size".into()));
        }
        let password = self.entry(addr)?.password;
        let per_call = (WRITE_DATA_MAX / bs).max(1);
        for (i, chunk) in images.chunks(per_call).enumerate() {
            let start = first + i * per_call;
            let mut payload = password.to_vec();
            payload.extend(uid.bytes());
            payload.extend([start as u8, chunk.len() as u8, bs as u8]);
            payload.extend(chunk.concat());
            let frames = self.call(bus, addr, Command::WriteTag, payload)?;
            check(&frames[0])?;
        }
        Ok(())
    }

    pub fn set_addr(&mut self, bus: &mut impl Bus, addr: u8, new_addr: u8) -> Result<(), NetError> {
        if new_addr > MAX_STATION_ADDR {
            return Err(NetError::BadAddress(new_addr));
        }
        if new_addr != addr && self.roster.contains_key(&new_addr) {
            return Err(NetError::DuplicateAddress(new_addr));
        }
        let mut payload = self.entry(addr)?.password.to_vec();
        payload.push(new_addr);
        let frames = self.call(bus, addr, Command::SetAddr, payload)?;
        check(&frames[0])?;
        let entry = self.roster.remove(&addr).unwrap();
        self.roster.insert(new_addr, entry);
        Ok(())
    }

    pub fn set_baud(&mut self, bus: &mut impl Bus, addr: u8, baud: BaudClass) -> Result<(), NetError> {
        let mut payload = self.entry(addr)?.password.to_vec();
        payload.push(baud.code());
        let frames = self.call(bus, addr, Command::SetBaud, payload)?;
        check(&frames[0]).map(drop)
    }

    /// Changes the station password. `current` is what the operator claims
    /// the station password to be; the station verifies it.
    pub fn set_password(
        &mut self,
        bus: &mut impl Bus,
        addr: u8,
        current: [u8; 4],
        new: [u8; 4],
    ) -> Result<(), NetError> {
        let mut payload = current.to_vec();
        payload.extend(new);
        let frames = self.call(bus, addr, Command::SetPassword, payload)?;
        check(&frames[0])?;
        self.roster.get_mut(&addr).unwrap().password = new;
        Ok(())
    }

    pub fn clear_events(&mut self, bus: &mut impl Bus, addr: u8) -> Result<(), NetError> {
        let payload = self.entry(addr)?.password.to_vec();
        let frames = self.call(bus, addr, Command::ClearEvents, payload)?;
        check(&frames[0]).map(drop)
    }
}
