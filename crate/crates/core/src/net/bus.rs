//! Bus transports. [`SimBus`] hosts the stations and the simulation world in
//! process; [`StreamBus`] speaks the same bytes over any `Read + Write`
//! stream, with [`serve_stream`] running the station side.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::frame::{Frame, FrameDecoder};
use super::ring::EventKind;
use super::station::{Command, Station, Status, FLAG_MORE, RESPONSE_FLAG};
use super::NetError;
use crate::rf::{FieldChange, FieldChangeKind, FieldGeometry, ReaderId, RfError, TagEmulation, Uid, World};

/// One serialized command/response exchange with the addressed station.
pub trait Bus {
    fn transact(&mut self, request: &Frame) -> Result<Vec<Frame>, NetError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Tx,
    Rx,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub at_us: u64,
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

impl TranscriptEntry {
    /// `<sim time us, 12 digits> <TX|RX> <hex bytes>`
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "{:012} {}",
            self.at_us,
            match self.direction {
                Direction::Tx => "TX",
                Direction::Rx => "RX",
            }
        );
        for b in &self.bytes {
            let _ = write!(line, " {b:02X}");
        }
        line
    }
}

/// Bounded log of every frame put on the simulated bus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    entries: VecDeque<TranscriptEntry>,
    limit: usize,
}

impl Default for Transcript {
    fn default() -> Self {
        Transcript { entries: VecDeque::new(), limit: 10_000 }
    }
}

impl Transcript {
    fn push(&mut self, entry: TranscriptEntry) {
        if self.entries.len() == self.limit {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| e.to_line() + "\n").collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// In-process multi-drop bus: the stations, the world their antennas look
/// into, and the frame transcript.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimBus {
    stations: BTreeMap<u8, Station>,
    detached: BTreeSet<u8>,
    world: World,
    #[serde(skip)]
    transcript: Transcript,
}

impl SimBus {
    pub fn new(world: World) -> Self {
        SimBus { world, ..Default::default() }
    }

    /// Connects a station and gives its antenna the reader profile.
    pub fn add_station(&mut self, station: Station, geometry: FieldGeometry) -> Result<(), NetError> {
        if !super::frame::valid_addr(station.addr) || station.addr == super::frame::BROADCAST {
            return Err(NetError::BadAddress(station.addr));
        }
        if self.stations.contains_key(&station.addr) {
            return Err(NetError::DuplicateAddress(station.addr));
        }
        if self.stations.values().any(|s| s.reader == station.reader) {
            return Err(NetError::Protocol(format!("reader {} already driven", station.reader)));
        }
        self.world.set_reader(station.reader, geometry);
        self.stations.insert(station.addr, station);
        Ok(())
    }

    pub fn station(&self, addr: u8) -> Option<&Station> {
        self.stations.get(&addr)
    }

    pub fn stations(&self) -> impl Iterator<Item = &Station> {
        self.stations.values()
    }

    pub fn detach(&mut self, addr: u8) {
        self.detached.insert(addr);
    }

    pub fn attach(&mut self, addr: u8) {
        self.detached.remove(&addr);
    }

    pub fn is_attached(&self, addr: u8) -> bool {
        self.stations.contains_key(&addr) && !self.detached.contains(&addr)
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn transcript_mut(&mut self) -> &mut Transcript {
        &mut self.transcript
    }

    fn station_for_reader(&mut self, reader: ReaderId) -> Option<&mut Station> {
        self.stations.values_mut().find(|s| s.reader == reader)
    }

    fn journal(&mut self, changes: &[FieldChange]) {
        for change in changes {
            let kind = match change.kind {
                FieldChangeKind::Enter => EventKind::TagEnter,
                FieldChangeKind::Leave => EventKind::TagLeave,
            };
            if let Some(st) = self.station_for_reader(change.reader) {
                st.record(kind, Some(change.uid), change.at_us);
            }
        }
    }

    pub fn add_tag(&mut self, tag: TagEmulation) -> Result<Vec<FieldChange>, RfError> {
        let changes = self.world.add_tag(tag)?;
        self.journal(&changes);
        Ok(changes)
    }

    pub fn remove_tag(&mut self, uid: Uid) -> Result<Vec<FieldChange>, RfError> {
        let changes = self.world.remove_tag(uid)?;
        self.journal(&changes);
        Ok(changes)
    }

    pub fn move_tag(&mut self, uid: Uid, position_cm: f64) -> Result<Vec<FieldChange>, RfError> {
        let changes = self.world.move_tag(uid, position_cm)?;
        self.journal(&changes);
        Ok(changes)
    }

    /// Places a tag at the antenna of station `addr` (or out of every field).
    pub fn place_tag(&mut self, uid: Uid, addr: Option<u8>, position_cm: f64) -> Result<Vec<FieldChange>, NetError> {
        let reader = match addr {
            Some(a) => Some(self.stations.get(&a).ok_or(NetError::UnknownStation(a))?.reader),
            None => None,
        };
        let changes = self.world.place_tag(uid, reader, position_cm)?;
        self.journal(&changes);
        Ok(changes)
    }

    pub fn lock_block(&mut self, uid: Uid, block: usize) -> Result<(), RfError> {
        self.world.lock_block(uid, block)
    }

    pub fn advance_clock(&mut self, us: u64) {
        self.world.advance(us);
    }

    /// Station side of the wire: executes one request frame against every
    /// station it addresses and returns the response frames.
    pub fn deliver(&mut self, frame: &Frame) -> Vec<Frame> {
        if frame.is_broadcast() {
            // Every station taking the same address would be unaddressable.
            if frame.cmd == Command::SetAddr as u8 {
                return Vec::new();
            }
            for addr in self.stations.keys().copied().collect::<Vec<_>>() {
                if !self.detached.contains(&addr) {
                    let st = self.stations.get_mut(&addr).unwrap();
                    st.dispatch(frame, &mut self.world);
                }
            }
            self.rekey();
            return Vec::new();
        }
        if !self.is_attached(frame.addr) {
            return Vec::new();
        }
        if frame.cmd == Command::SetAddr as u8 {
            // Two stations answering to one address would jam the bus.
            if let Some(&new_addr) = frame.payload.get(4) {
                if new_addr != frame.addr && self.stations.contains_key(&new_addr) {
                    let payload = vec![Status::BadRequest as u8, 0];
                    return vec![Frame { addr: frame.addr, cmd: frame.cmd | RESPONSE_FLAG, payload }];
                }
            }
        }
        let st = self.stations.get_mut(&frame.addr).unwrap();
        let responses = st.dispatch(frame, &mut self.world);
        self.rekey();
        responses
    }

    fn rekey(&mut self) {
        let moved: Vec<u8> = self.stations.iter().filter(|(k, s)| **k != s.addr).map(|(k, _)| *k).collect();
        for old in moved {
            let st = self.stations.remove(&old).unwrap();
            if self.detached.remove(&old) {
                self.detached.insert(st.addr);
            }
            self.stations.insert(st.addr, st);
        }
    }
}

impl Bus for SimBus {
    fn transact(&mut self, request: &Frame) -> Result<Vec<Frame>, NetError> {
        let bytes = request.encode();
        self.transcript.push(TranscriptEntry {
            at_us: self.world.clock_us(),
            direction: Direction::Tx,
            bytes: bytes.clone(),
        });

        // The station sees only the bytes on the wire.
        let mut rx = FrameDecoder::new();
        rx.push(&bytes);
        let Some(received) = rx.next_frame() else {
            return Err(NetError::Protocol("request did not survive framing".into()));
        };
        let responses = self.deliver(&received);
        if request.is_broadcast() {
            return Ok(Vec::new());
        }
        if responses.is_empty() {
            return Err(NetError::Timeout(request.addr));
        }

        let mut master_rx = FrameDecoder::new();
        for frame in &responses {
            let wire = frame.encode();
            self.transcript.push(TranscriptEntry {
                at_us: self.world.clock_us(),
                direction: Direction::Rx,
                bytes: wire.clone(),
            });
            master_rx.push(&wire);
        }
        Ok(std::iter::from_fn(|| master_rx.next_frame()).collect())
    }
}

/// Master side of a byte-stream link to a process running [`serve_stream`].
/// Response timeouts come from the stream's own read timeout.
pub struct StreamBus<S> {
    stream: S,
    decoder: FrameDecoder,
}

impl<S: Read + Write> StreamBus<S> {
    pub fn new(stream: S) -> Self {
        StreamBus { stream, decoder: FrameDecoder::new() }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

impl<S: Read + Write> Bus for StreamBus<S> {
    fn transact(&mut self, request: &Frame) -> Result<Vec<Frame>, NetError> {
        self.stream.write_all(&request.encode()).map_err(|e| NetError::Io(e.to_string()))?;
        self.stream.flush().map_err(|e| NetError::Io(e.to_string()))?;
        if request.is_broadcast() {
            return Ok(Vec::new());
        }
        let mut frames = Vec::new();
        let mut buf = [0u8; 512];
        loop {
            while let Some(frame) = self.decoder.next_frame() {
                if frame.addr != request.addr || frame.cmd != request.cmd | RESPONSE_FLAG {
                    continue;
                }
                let more = frame.payload.get(1).is_some_and(|f| f & FLAG_MORE != 0);
                frames.push(frame);
                if !more {
                    return Ok(frames);
                }
            }
            match self.stream.read(&mut buf) {
                Ok(0) => return Err(NetError::Io("link closed".into())),
                Ok(n) => self.decoder.push(&buf[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(NetError::Timeout(request.addr))
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(NetError::Io(e.to_string())),
            }
        }
    }
}

/// Station side of a stream link: answers frames until the peer closes.
pub fn serve_stream<S: Read + Write>(mut stream: S, bus: &mut SimBus) -> io::Result<()> {
    let mut decoder = FrameDecoder::new();
    let mut buf = [0u8; 512];
    loop {
        let n = match stream.read(&mut buf) {
            Ok(0) => return Ok(()),
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        decoder.push(&buf[..n]);
        while let Some(frame) = decoder.next_frame() {
            for response in bus.deliver(&frame) {
                stream.write_all(&response.encode())?;
            }
            stream.flush()?;
        }
    }
}
