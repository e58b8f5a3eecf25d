//! Per-station event journal: a 255-entry ring drained by acknowledged
//! sequence number.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::rf::Uid;

pub const EVENT_RING_CAPACITY: usize = 255;
/// Wire size of one record: seq(4) station(1) kind(1) has_uid(1) uid(8) ts(8).
pub const EVENT_WIRE_LEN: usize = 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    TagEnter,
    TagLeave,
    Alarm,
    ConfigChange,
    BufferOverrunWarning,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::TagEnter,
        EventKind::TagLeave,
        EventKind::Alarm,
        EventKind::ConfigChange,
        EventKind::BufferOverrunWarning,
    ];

    pub fn code(self) -> u8 {
        match self {
            EventKind::TagEnter => 1,
            EventKind::TagLeave => 2,
            EventKind::Alarm => 3,
            EventKind::ConfigChange => 4,
            EventKind::BufferOverrunWarning => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::TagEnter => "TAG_ENTER",
            EventKind::TagLeave => "TAG_LEAVE",
            EventKind::Alarm => "ALARM",
            EventKind::ConfigChange => "CONFIG_CHANGE",
            EventKind::BufferOverrunWarning => "BUFFER_OVERRUN_WARNING",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown event kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u32,
    pub station: u8,
    pub kind: EventKind,
    pub uid: Option<Uid>,
    pub sim_timestamp_us: u64,
}

impl EventRecord {
    pub fn to_wire(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.push(self.station);
        out.push(self.kind.code());
        match self.uid {
            Some(uid) => {
                out.push(1);
                out.extend_from_slice(&uid.bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&[0; 8]);
            }
        }
        out.extend_from_slice(&self.sim_timestamp_us.to_le_bytes());
    }

    pub fn from_wire(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < EVENT_WIRE_LEN {
            return None;
        }
        let uid = match bytes[6] {
            0 => None,
            1 => Some(Uid::new(bytes[7..15].try_into().unwrap()).ok()?),
            _ => return None,
        };
        Some(EventRecord {
            seq: u32::from_le_bytes(bytes[0..4].try_into().unwrap()),
            station: bytes[4],
            kind: EventKind::from_code(bytes[5])?,
            uid,
            sim_timestamp_us: u64::from_le_bytes(bytes[15..23].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PushOutcome {
    pub evicted: Option<EventRecord>,
    /// Usage just rose to 90% or more since the last time it was below.
    pub crossed_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRing {
    records: VecDeque<EventRecord>,
    capacity: usize,
    warned: bool,
}

impl Default for EventRing {
    fn default() -> Self {
        Self::with_capacity(EVENT_RING_CAPACITY)
    }
}

impl EventRing {
    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0);
        EventRing { records: VecDeque::with_capacity(capacity), capacity, warned: false }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn above_threshold(&self) -> bool {
        self.records.len() * 10 >= self.capacity * 9
    }

    fn rearm(&mut self) {
        if !self.above_threshold() {
            self.warned = false;
        }
    }

    pub fn push(&mut self, record: EventRecord) -> PushOutcome {
        let evicted = if self.records.len() == self.capacity { self.records.pop_front() } else { None };
        self.records.push_back(record);
        let crossed_threshold = !self.warned && self.above_threshold();
        if crossed_threshold {
            self.warned = true;
        }
        PushOutcome { evicted, crossed_threshold }
    }

    /// Retained records with `seq > after_seq`, oldest first.
    pub fn read(&self, after_seq: u32) -> impl Iterator<Item = &EventRecord> {
        let start = self.records.partition_point(|r| r.seq <= after_seq);
        self.records.range(start..)
    }

    /// Releases every record with `seq <= seq`.
    pub fn acknowledge(&mut self, seq: u32) {
        let n = self.records.partition_point(|r| r.seq <= seq);
        self.records.drain(..n);
        self.rearm();
    }

    pub fn clear(&mut self) {
        self.records.clear();
        self.rearm();
    }

    pub fn iter(&self) -> impl Iterator<Item = &EventRecord> {
        self.records.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seq: u32) -> EventRecord {
        EventRecord { seq, station: 0, kind: EventKind::TagEnter, uid: None, sim_timestamp_us: 0 }
    }

    #[test]
    fn eviction_keeps_newest() {
        let mut ring = EventRing::default();
        for seq in 1..=300 {
            ring.push(rec(seq));
        }
        let seqs: Vec<u32> = ring.read(0).map(|r| r.seq).collect();
        assert_eq!(seqs, (46..=300).collect::<Vec<_>>());
    }

    #[test]
    fn read_after_seq() {
        let mut ring = EventRing::default();
        for seq in 1..=10 {
            ring.push(rec(seq));
        }
        let seqs: Vec<u32> = ring.read(7).map(|r| r.seq).collect();
        assert_eq!(seqs, vec![8, 9, 10]);
        assert_eq!(ring.read(10).count(), 0);
    }

    #[test]
    fn threshold_crossing_once_then_rearm() {
        let mut ring = EventRing::default();
        let crossings: Vec<u32> = (1..=300).filter(|&s| ring.push(rec(s)).crossed_threshold).collect();
        assert_eq!(crossings, vec![230]);

        ring.acknowledge(280);
        assert_eq!(ring.len(), 20);
        let crossings: Vec<u32> = (301..=600).filter(|&s| ring.push(rec(s)).crossed_threshold).collect();
        assert_eq!(crossings, vec![281 + 229]);
    }

    #[test]
    fn wire_roundtrip() {
        let r = EventRecord {
            seq: 77,
            station: 3,
            kind: EventKind::TagLeave,
            uid: Some(Uid::from_serial(0xABCDEF)),
            sim_timestamp_us: 123_456_789,
        };
        let mut out = Vec::new();
        r.to_wire(&mut out);
        assert_eq!(out.len(), EVENT_WIRE_LEN);
        assert_eq!(EventRecord::from_wire(&out), Some(r));
    }
}
