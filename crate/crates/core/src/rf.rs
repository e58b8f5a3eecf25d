//! Deterministic air-interface simulation.
//!
//! Tags sit at a distance from one reader antenna. A tag is readable when its
//! distance is at most the reader's read range (hard cutoff) and writable when
//! it is at most the write range. Multi-tag inventory uses 16-slot rounds: a
//! tag answers in the slot given by the next 4 bits of its uid above the
//! current mask, and every collided slot is queued as a new round with the
//! mask extended by that slot's nibble.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const UID_PREFIX: u8 = 0xE0;
pub const SLOTS_PER_ROUND: u32 = 16;
pub const DEFAULT_BLOCK_COUNT: usize = 64;
pub const DEFAULT_BLOCK_SIZE: usize = 4;
pub const DEFAULT_MAX_TAGS: usize = 64;

pub type ReaderId = u8;

/// 8-byte tag identifier; byte 0 is the family prefix 0xE0. Displayed and
/// parsed as 16 uppercase hex digits, most significant byte first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Uid([u8; 8]);

impl Uid {
    pub fn new(bytes: [u8; 8]) -> Result<Self, RfError> {
        if bytes[0] != UID_PREFIX {
            return Err(RfError::InvalidUid(hex::encode_upper(bytes)));
        }
        Ok(Uid(bytes))
    }

    /// Builds a uid from the 56 bits below the prefix.
    pub fn from_serial(serial: u64) -> Self {
        let mut bytes = (serial & 0x00FF_FFFF_FFFF_FFFF).to_be_bytes();
        bytes[0] = UID_PREFIX;
        Uid(bytes)
    }

    pub fn bytes(&self) -> [u8; 8] {
        self.0
    }

    pub fn as_u64(&self) -> u64 {
        u64::from_be_bytes(self.0)
    }

    /// The 4-bit slot index at nibble position `depth` (0 = least significant).
    pub fn nibble(&self, depth: u32) -> u8 {
        ((self.as_u64() >> (4 * depth)) & 0xF) as u8
    }
}

impl fmt::Display for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode_upper(self.0))
    }
}

impl FromStr for Uid {
    type Err = RfError;

    fn from_str(s: &str) -> Result<Self, RfError> {
        let raw = hex::decode(s.trim()).map_err(|_| RfError::InvalidUid(s.to_string()))?;
        let bytes: [u8; 8] = raw.try_into().map_err(|_| RfError::InvalidUid(s.to_string()))?;
        Uid::new(bytes)
    }
}

impl Serialize for Uid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Uid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RfError {
    #[error("tag {0} not found in reader field")]
    TagNotFound(Uid),
    #[error("blocks {first}..{end} outside tag memory of {blocks} blocks")]
    BlockOutOfRange { first: usize, end: usize, blocks: usize },
    #[error("block {0} is locked")]
    BlockLocked(usize),
    #[error("block image of {got} bytes, tag block size is {expected}")]
    BlockSizeMismatch { expected: usize, got: usize },
    #[error("uid {0} already present in the world")]
    DuplicateUid(Uid),
    #[error("invalid uid `{0}` (16 hex digits starting E0)")]
    InvalidUid(String),
    #[error("unknown reader {0}")]
    UnknownReader(ReaderId),
    #[error("invalid tag geometry: {0}")]
    InvalidGeometry(String),
}

/// Range envelope of one reader/antenna combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldGeometry {
    pub read_range_cm: f64,
    pub write_range_cm: f64,
    /// Tags singulated per inventory command before the reader stops.
    #[serde(default = "default_max_tags")]
    pub max_tags: usize,
}

fn default_max_tags() -> usize {
    DEFAULT_MAX_TAGS
}

impl FieldGeometry {
    pub const SHORT: FieldGeometry =
        FieldGeometry { read_range_cm: 9.0, write_range_cm: 7.0, max_tags: DEFAULT_MAX_TAGS };
    pub const MEDIUM: FieldGeometry =
        FieldGeometry { read_range_cm: 20.0, write_range_cm: 15.0, max_tags: DEFAULT_MAX_TAGS };
    pub const LONG: FieldGeometry =
        FieldGeometry { read_range_cm: 40.0, write_range_cm: 20.0, max_tags: DEFAULT_MAX_TAGS };

    pub fn profile(name: &str) -> Option<FieldGeometry> {
        match name {
            "short" => Some(Self::SHORT),
            "medium" => Some(Self::MEDIUM),
            "long" => Some(Self::LONG),
            _ => None,
        }
    }

    pub fn new(read_range_cm: f64, write_range_cm: f64) -> Result<Self, RfError> {
        if !(9.0..=40.0).contains(&read_range_cm) {
            return Err(RfError::InvalidGeometry(format!("read range {read_range_cm} cm outside 9..=40")));
        }
        if !(0.0..=read_range_cm).contains(&write_range_cm) {
            return Err(RfError::InvalidGeometry(format!(
                "write range {write_range_cm} cm must be within 0..=read range"
            )));
        }
        Ok(FieldGeometry { read_range_cm, write_range_cm, max_tags: DEFAULT_MAX_TAGS })
    }

    pub fn in_read_range(&self, position_cm: f64) -> bool {
        position_cm <= self.read_range_cm
    }

    pub fn in_write_range(&self, position_cm: f64) -> bool {
        position_cm <= self.write_range_cm
    }
}

impl Default for FieldGeometry {
    fn default() -> Self {
        Self::LONG
    }
}

/// Simulated air-interface timing, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotTiming {
    pub slot_duration_us: u64,
    pub single_read_duration_us: u64,
}

impl Default for SlotTiming {
    /// 8333 us per addressed read is 120 reads per simulated second.
    fn default() -> Self {
        SlotTiming { slot_duration_us: 500, single_read_duration_us: 8_333 }
    }
}

impl SlotTiming {
    pub fn round_duration_us(&self) -> u64 {
        self.slot_duration_us * SLOTS_PER_ROUND as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagEmulation {
    pub uid: Uid,
    pub block_size: usize,
    pub blocks: Vec<Vec<u8>>,
    pub locked: Vec<bool>,
    /// Reader whose antenna the tag is near; `None` when it is in no field.
    pub reader: Option<ReaderId>,
    pub position_cm: f64,
}

impl TagEmulation {
    pub fn new(uid: Uid) -> Self {
        Self::with_memory(uid, DEFAULT_BLOCK_COUNT, DEFAULT_BLOCK_SIZE)
    }

    pub fn with_memory(uid: Uid, block_count: usize, block_size: usize) -> Self {
        TagEmulation {
            uid,
            block_size,
            blocks: vec![vec![0; block_size]; block_count],
            locked: vec![false; block_count],
            reader: None,
            position_cm: 0.0,
        }
    }

    pub fn at(mut self, reader: ReaderId, position_cm: f64) -> Self {
        self.reader = Some(reader);
        self.position_cm = position_cm;
        self
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn capacity(&self) -> usize {
        self.block_count() * self.block_size
    }

    fn check_range(&self, first: usize, count: usize) -> Result<(), RfError> {
        let end = first.saturating_add(count);
        if end > self.blocks.len() {
            return Err(RfError::BlockOutOfRange { first, end, blocks: self.blocks.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryResult {
    pub uids: Vec<Uid>,
    pub rounds: u32,
    pub duration_us: u64,
    /// Set when the reader's tag cap stopped singulation early.
    pub truncated: bool,
}

/// Runs slotted anti-collision over the tags of one field.
pub fn inventory<'a, I>(tags: I, geometry: &FieldGeometry, timing: &SlotTiming) -> InventoryResult
where
    I: IntoIterator<Item = &'a TagEmulation>,
{
    let in_range: Vec<Uid> =
        tags.into_iter().filter(|t| geometry.in_read_range(t.position_cm)).map(|t| t.uid).collect();

    let mut found = Vec::new();
    let mut rounds = 0u32;
    let mut truncated = false;
    // Each entry is one round: (mask depth in nibbles, responding tags).
    let mut queue: VecDeque<(u32, Vec<Uid>)> = VecDeque::from([(0, in_range)]);

    'rounds: while let Some((depth, responders)) = queue.pop_front() {
        rounds += 1;
        let mut slots: [Vec<Uid>; SLOTS_PER_ROUND as usize] = Default::default();
        for uid in responders {
            slots[uid.nibble(depth) as usize].push(uid);
        }
        for slot in slots {
            match slot.len() {
                0 => {}
                1 => {
                    if found.len() == geometry.max_tags {
                        truncated = true;
                        break 'rounds;
                    }
                    found.push(slot[0]);
                }
                _ => queue.push_back((depth + 1, slot)),
            }
        }
    }

    found.sort();
    InventoryResult { uids: found, rounds, duration_us: rounds as u64 * timing.round_duration_us(), truncated }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldChangeKind {
    Enter,
    Leave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldChange {
    pub reader: ReaderId,
    pub uid: Uid,
    pub kind: FieldChangeKind,
    pub at_us: u64,
}

/// The simulation world: every tag, every reader antenna, and the simulated
/// clock. All mutation goes through `&mut self`, so one owner serializes it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct World {
    tags: BTreeMap<Uid, TagEmulation>,
    readers: BTreeMap<ReaderId, FieldGeometry>,
    timing: SlotTiming,
    clock_us: u64,
}

impl World {
    pub fn new(timing: SlotTiming) -> Self {
        World { timing, ..Default::default() }
    }

    pub fn timing(&self) -> &SlotTiming {
        &self.timing
    }

    pub fn clock_us(&self) -> u64 {
        self.clock_us
    }

    pub fn advance(&mut self, us: u64) {
        self.clock_us += us;
    }

    pub fn set_reader(&mut self, reader: ReaderId, geometry: FieldGeometry) {
        self.readers.insert(reader, geometry);
    }

    pub fn reader(&self, reader: ReaderId) -> Result<&FieldGeometry, RfError> {
        self.readers.get(&reader).ok_or(RfError::UnknownReader(reader))
    }

    pub fn readers(&self) -> impl Iterator<Item = (ReaderId, &FieldGeometry)> {
        self.readers.iter().map(|(id, g)| (*id, g))
    }

    pub fn add_tag(&mut self, tag: TagEmulation) -> Result<Vec<FieldChange>, RfError> {
        if self.tags.contains_key(&tag.uid) {
            return Err(RfError::DuplicateUid(tag.uid));
        }
        if tag.blocks.is_empty() || tag.block_size == 0 {
            return Err(RfError::InvalidGeometry("tag needs at least one block of one byte".into()));
        }
        let (uid, reader, position) = (tag.uid, tag.reader, tag.position_cm);
        let mut placed = tag;
        placed.reader = None;
        placed.position_cm = 0.0;
        self.tags.insert(uid, placed);
        self.place_tag(uid, reader, position)
    }

    pub fn remove_tag(&mut self, uid: Uid) -> Result<Vec<FieldChange>, RfError> {
        let changes = self.place_tag(uid, None, 0.0)?;
        self.tags.remove(&uid);
        Ok(changes)
    }

    pub fn tag(&self, uid: Uid) -> Option<&TagEmulation> {
        self.tags.get(&uid)
    }

    pub fn tags(&self) -> impl Iterator<Item = &TagEmulation> {
        self.tags.values()
    }

    /// Tags near `reader`, whether or not they are within range.
    pub fn field(&self, reader: ReaderId) -> impl Iterator<Item = &TagEmulation> {
        self.tags.values().filter(move |t| t.reader == Some(reader))
    }

    fn is_readable(&self, tag: &TagEmulation) -> bool {
        match tag.reader.and_then(|r| self.readers.get(&r)) {
            Some(g) => g.in_read_range(tag.position_cm),
            None => false,
        }
    }

    pub fn inventory(&mut self, reader: ReaderId) -> Result<InventoryResult, RfError> {
        let geometry = *self.reader(reader)?;
        let result = inventory(self.field(reader), &geometry, &self.timing);
        self.clock_us += result.duration_us;
        Ok(result)
    }

    fn tag_in_field(
        &self,
        reader: ReaderId,
        uid: Uid,
        within: impl Fn(&FieldGeometry, f64) -> bool,
    ) -> Result<&TagEmulation, RfError> {
        let geometry = self.reader(reader)?;
        match self.tags.get(&uid) {
            Some(tag) if tag.reader == Some(reader) && within(geometry, tag.position_cm) => Ok(tag),
            _ => Err(RfError::TagNotFound(uid)),
        }
    }

    pub fn read_blocks(
        &mut self,
        reader: ReaderId,
        uid: Uid,
        first: usize,
        count: usize,
    ) -> Result<Vec<Vec<u8>>, RfError> {
        let tag = self.tag_in_field(reader, uid, FieldGeometry::in_read_range)?;
        tag.check_range(first, count)?;
        let blocks = tag.blocks[first..first + count].to_vec();
        self.clock_us += self.timing.single_read_duration_us;
        Ok(blocks)
    }

    /// Replaces `images.len()` blocks starting at `first`; all or nothing.
    pub fn write_blocks(
        &mut self,
        reader: ReaderId,
        uid: Uid,
        first: usize,
        images: &[Vec<u8>],
    ) -> Result<(), RfError> {
        let tag = self.tag_in_field(reader, uid, FieldGeometry::in_write_range)?;
        tag.check_range(first, images.len())?;
        if let Some(bad) = images.iter().find(|b| b.len() != tag.block_size) {
            return Err(RfError::BlockSizeMismatch { expected: tag.block_size, got: bad.len() });
        }
        if let Some(locked) = (first..first + images.len()).find(|&i| tag.locked[i]) {
            return Err(RfError::BlockLocked(locked));
        }
        let single = self.timing.single_read_duration_us;
        let tag = self.tags.get_mut(&uid).expect("checked above");
        for (slot, image) in tag.blocks[first..].iter_mut().zip(images) {
            slot.copy_from_slice(image);
        }
        self.clock_us += single;
        Ok(())
    }

    pub fn lock_block(&mut self, uid: Uid, block: usize) -> Result<(), RfError> {
        let tag = self.tags.get_mut(&uid).ok_or(RfError::TagNotFound(uid))?;
        tag.check_range(block, 1)?;
        tag.locked[block] = true;
        Ok(())
    }

    /// Moves a tag within its current reader's field.
    pub fn move_tag(&mut self, uid: Uid, position_cm: f64) -> Result<Vec<FieldChange>, RfError> {
        let reader = self.tags.get(&uid).ok_or(RfError::TagNotFound(uid))?.reader;
        self.place_tag(uid, reader, position_cm)
    }

    /// Puts a tag near `reader` (or out of every field for `None`), emitting
    /// LEAVE/ENTER for every range crossing.
    pub fn place_tag(
        &mut self,
        uid: Uid,
        reader: Option<ReaderId>,
        position_cm: f64,
    ) -> Result<Vec<FieldChange>, RfError> {
        if !position_cm.is_finite() || position_cm < 0.0 {
            return Err(RfError::InvalidGeometry(format!("position {position_cm} cm")));
        }
        if let Some(r) = reader {
            self.reader(r)?;
        }
        let tag = self.tags.get(&uid).ok_or(RfError::TagNotFound(uid))?;
        let was = tag.reader.filter(|_| self.is_readable(tag));

        let tag = self.tags.get_mut(&uid).expect("present");
        tag.reader = reader;
        tag.position_cm = position_cm;
        let tag = &self.tags[&uid];
        let now = reader.filter(|_| self.is_readable(tag));

        let at_us = self.clock_us;
        let mut changes = Vec::new();
        if was != now {
            if let Some(r) = was {
                changes.push(FieldChange { reader: r, uid, kind: FieldChangeKind::Leave, at_us });
            }
            if let Some(r) = now {
                changes.push(FieldChange { reader: r, uid, kind: FieldChangeKind::Enter, at_us });
            }
        }
        Ok(changes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world_with(tags: &[(u64, f64)], geometry: FieldGeometry) -> World {
        let mut w = World::new(SlotTiming::default());
        w.set_reader(0, geometry);
        for &(serial, pos) in tags {
            w.add_tag(TagEmulation::new(Uid::from_serial(serial)).at(0, pos)).unwrap();
        }
        w
    }

    #[test]
    fn uid_text() {
        let uid: Uid = "E004010000000001".parse().unwrap();
        assert_eq!(uid, Uid::from_serial(0x04010000000001));
        assert_eq!(uid.to_string(), "E004010000000001");
        assert!("E00401".parse::<Uid>().is_err());
        assert!("0004010000000001".parse::<Uid>().is_err());
        assert_eq!(uid.nibble(0), 1);
        assert_eq!(uid.nibble(15), 0xE);
    }

    #[test]
    fn empty_field_inventory() {
        let r = inventory([], &FieldGeometry::LONG, &SlotTiming::default());
        assert_eq!(r.uids, vec![]);
        assert_eq!(r.rounds, 1);
        assert_eq!(r.duration_us, 16 * 500);
    }

    #[test]
    fn single_tag_inventory() {
        let w = world_with(&[(5, 10.0)], FieldGeometry::LONG);
        let r = inventory(w.field(0), &FieldGeometry::LONG, w.timing());
        assert_eq!(r.uids, vec![Uid::from_serial(5)]);
        assert_eq!(r.rounds, 1);
    }

    #[test]
    fn out_of_range_tags_are_not_inventoried() {
        let w = world_with(&[(1, 40.0), (2, 40.5)], FieldGeometry::LONG);
        let r = inventory(w.field(0), &FieldGeometry::LONG, w.timing());
        assert_eq!(r.uids, vec![Uid::from_serial(1)]);
    }

    #[test]
    fn shared_low_nibble_needs_second_round() {
        // 0x01 and 0x11 collide in slot 1, then split on nibble 1.
        let w = world_with(&[(0x01, 1.0), (0x11, 1.0), (0x02, 1.0)], FieldGeometry::LONG);
        let r = inventory(w.field(0), &FieldGeometry::LONG, w.timing());
        assert_eq!(r.uids.len(), 3);
        assert_eq!(r.rounds, 2);
    }

    #[test]
    fn tag_cap_truncates() {
        let mut g = FieldGeometry::LONG;
        g.max_tags = 2;
        let w = world_with(&[(1, 1.0), (2, 1.0), (3, 1.0)], g);
        let r = inventory(w.field(0), &g, w.timing());
        assert_eq!(r.uids.len(), 2);
        assert!(r.truncated);
    }

    #[test]
    fn read_range_boundaries() {
        let mut w = world_with(&[(1, 5.0)], FieldGeometry::SHORT);
        let uid = Uid::from_serial(1);
        assert_eq!(w.read_blocks(0, uid, 0, 4).unwrap().len(), 4);

        let mut w = world_with(&[(1, 41.0)], FieldGeometry::LONG);
        assert_eq!(w.read_blocks(0, uid, 0, 1), Err(RfError::TagNotFound(uid)));

        let mut w = world_with(&[(1, 1.0)], FieldGeometry::LONG);
        assert!(matches!(w.read_blocks(0, uid, 63, 2), Err(RfError::BlockOutOfRange { .. })));
    }

    #[test]
    fn write_then_read() {
        let mut w = world_with(&[(1, 1.0)], FieldGeometry::LONG);
        let uid = Uid::from_serial(1);
        w.write_blocks(0, uid, 0, &[vec![1, 2, 3, 4]]).unwrap();
        assert_eq!(w.read_blocks(0, uid, 0, 1).unwrap(), vec![vec![1, 2, 3, 4]]);
    }

    #[test]
    fn locked_block_is_atomic() {
        let mut w = world_with(&[(1, 1.0)], FieldGeometry::LONG);
        let uid = Uid::from_serial(1);
        w.lock_block(uid, 1).unwrap();
        let err = w.write_blocks(0, uid, 0, &[vec![9; 4], vec![9; 4]]);
        assert_eq!(err, Err(RfError::BlockLocked(1)));
        assert_eq!(w.read_blocks(0, uid, 0, 2).unwrap(), vec![vec![0; 4], vec![0; 4]]);
    }

    #[test]
    fn write_range_shorter_than_read_range() {
        // LONG profile: read 40 cm, write 20 cm.
        let mut w = world_with(&[(1, 30.0)], FieldGeometry::LONG);
        let uid = Uid::from_serial(1);
        assert!(w.read_blocks(0, uid, 0, 1).is_ok());
        assert_eq!(w.write_blocks(0, uid, 0, &[vec![1; 4]]), Err(RfError::TagNotFound(uid)));
    }

    #[test]
    fn move_emits_crossings() {
        let mut w = world_with(&[(1, 50.0)], FieldGeometry::LONG);
        let uid = Uid::from_serial(1);
        let c = w.move_tag(uid, 10.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].kind, FieldChangeKind::Enter);
        assert!(w.move_tag(uid, 10.0).unwrap().is_empty());
        let c = w.move_tag(uid, 50.0).unwrap();
        assert_eq!(c[0].kind, FieldChangeKind::Leave);
        assert_eq!(w.move_tag(Uid::from_serial(99), 1.0), Err(RfError::TagNotFound(Uid::from_serial(99))));
    }

    #[test]
    fn moving_between_readers() {
        let mut w = world_with(&[(1, 5.0)], FieldGeometry::LONG);
        w.set_reader(1, FieldGeometry::SHORT);
        let uid = Uid::from_serial(1);
        let c = w.place_tag(uid, Some(1), 5.0).unwrap();
        assert_eq!(
            c.iter().map(|c| (c.reader, c.kind)).collect::<Vec<_>>(),
            vec![(0, FieldChangeKind::Leave), (1, FieldChangeKind::Enter)]
        );
    }

    #[test]
    fn default_profiles_span_envelope() {
        assert_eq!(FieldGeometry::SHORT.read_range_cm, 9.0);
        assert_eq!(FieldGeometry::LONG.read_range_cm, 40.0);
        for g in [FieldGeometry::SHORT, FieldGeometry::MEDIUM, FieldGeometry::LONG] {
            assert!(g.write_range_cm <= g.read_range_cm);
        }
        assert!(FieldGeometry::new(8.0, 5.0).is_err());
        assert!(FieldGeometry::new(20.0, 25.0).is_err());
    }
}
