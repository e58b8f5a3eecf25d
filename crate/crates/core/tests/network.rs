use crc::{Crc, CRC_16_IBM_3740};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfidtrace_core::net::frame::MAX_PAYLOAD;
use rfidtrace_core::net::master::{NetworkConfig, MAX_STATIONS};
use rfidtrace_core::net::station::DEFAULT_PASSWORD;
use rfidtrace_core::net::BROADCAST;
use rfidtrace_core::{
    frame_decode, frame_encode, EventKind, EventRecord, EventRing, FieldGeometry, Frame, FrameDecoder, Master,
    NetError, SimBus, SlotTiming, Station, TagEmulation, Uid, World,
};

const CCITT_FALSE: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

/// (name, addr, cmd, payload, frozen wire bytes)
const GOLDEN: &[(&str, u8, u8, &[u8], &str)] = &[
    ("ping station 5", 5, 0x01, &[], "aa0501005d14"),
    ("ping broadcast", 0xFF, 0x01, &[], "aaff0100ce30"),
    ("ping reply", 5, 0x81, &[0, 0, 1, 0], "aa05810400000100dea3"),
    ("set addr 3 to 7", 3, 0x02, &[0, 0, 0, 0, 7], "aa03020500000000074eaa"),
    ("set baud 9600", 3, 0x03, &[0, 0, 0, 0, 0], "aa0303050000000000c862"),
    ("set password", 3, 0x04, &[0, 0, 0, 0, 0x0a, 0x0b, 0x0c, 0x0d], "aa030408000000000a0b0c0da524"),
    ("inventory station 0", 0, 0x10, &[], "aa001000efcf"),
    ("read tag", 29, 0x11, &[0xE0, 0, 0, 0, 0, 0, 0, 1, 0, 8], "aa1d110ae00000000000000100082f5a"),
    ("get events after 0", 3, 0x20, &[0, 0, 0, 0], "aa032004000000004295"),
    ("clear events", 3, 0x21, &[0, 0, 0, 0], "aa03210400000000e2d0"),
    ("unknown command reply", 3, 0xFF, &[2, 0], "aa03ff0202007fbc"),
];

fn oracle_frame(addr: u8, cmd: u8, payload: &[u8]) -> Vec<u8> {
    let mut covered = vec![addr, cmd, payload.len() as u8];
    covered.extend_from_slice(payload);
    let mut out = vec![0xAA];
    out.extend_from_slice(&covered);
    out.extend(CCITT_FALSE.checksum(&covered).to_le_bytes());
    out
}

#[test]
fn golden_frames_decode_bit_exactly() {
    for &(name, addr, cmd, payload, wire) in GOLDEN {
        let bytes = hex::decode(wire).unwrap();
        assert_eq!(oracle_frame(addr, cmd, payload), bytes, "{name}: oracle");
        assert_eq!(frame_encode(addr, cmd, payload).unwrap(), bytes, "{name}: encode");
        let (frame, used) = frame_decode(&bytes).unwrap();
        assert_eq!(used, bytes.len(), "{name}");
        assert_eq!(frame, Frame { addr, cmd, payload: payload.to_vec() }, "{name}");
    }
}

#[test]
fn largest_frame() {
    let payload = [0x5A; MAX_PAYLOAD];
    let bytes = frame_encode(1, 0x12, &payload).unwrap();
    assert_eq!(bytes.len(), 206);
    assert_eq!(&bytes[204..], &[0x9C, 0xCA]);
    assert_eq!(bytes, oracle_frame(1, 0x12, &payload));
    assert!(frame_encode(1, 0x12, &[0; MAX_PAYLOAD + 1]).is_err());
    assert!(frame_encode(30, 0x01, &[]).is_err());
    assert!(frame_encode(BROADCAST, 0x01, &[]).is_ok());
}

fn valid_frame() -> impl Strategy<Value = Frame> {
    (prop_oneof![0u8..=29, Just(BROADCAST)], any::<u8>(), proptest::collection::vec(any::<u8>(), 0..40))
        .prop_map(|(addr, cmd, payload)| Frame { addr, cmd, payload })
}

proptest! {
    #[test]
    fn noise_never_crashes_decoder(noise in proptest::collection::vec(any::<u8>(), 0..600)) {
        let mut d = FrameDecoder::new();
        d.push(&noise);
        while d.next_frame().is_some() {}
        d.finish();
        let _ = frame_decode(&noise);
    }

    #[test]
    fn resynchronizes_after_noise(
        noise in proptest::collection::vec(any::<u8>().prop_filter("no start byte", |b| *b != 0xAA), 0..300),
        frames in proptest::collection::vec(valid_frame(), 1..6),
        chunk in 1usize..17,
    ) {
        let mut stream = noise;
        for f in &frames {
            stream.extend(f.encode());
        }
        let mut d = FrameDecoder::new();
        let mut got = Vec::new();
        for piece in stream.chunks(chunk) {
            d.push(piece);
            while let Some(f) = d.next_frame() {
                got.push(f);
            }
        }
        prop_assert_eq!(got, frames);
    }

    #[test]
    fn roundtrip(frame in valid_frame()) {
        let bytes = frame.encode();
        prop_assert_eq!(frame_decode(&bytes).unwrap(), (frame, bytes.len()));
    }
}

/// Garbage containing start bytes and corrupted frames ahead of a valid
/// frame: the decoder must still deliver the valid one, at end of input at
/// the latest.
#[test]
fn seeded_fuzz_always_recovers_trailing_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let target = Frame { addr: 7, cmd: 0x20, payload: vec![1, 2, 3, 4] };
    for _ in 0..2_000 {
        let mut stream: Vec<u8> = (0..rng.gen_range(0..120)).map(|_| rng.gen()).collect();
        if rng.gen_bool(0.5) {
            let mut broken = frame_encode(rng.gen_range(0..30), rng.gen(), &[9; 12]).unwrap();
            let at = rng.gen_range(0..broken.len());
            broken[at] ^= rng.gen_range(1..=255);
            stream.extend(broken);
        }
        stream.extend(target.encode());
        let mut d = FrameDecoder::new();
        d.push(&stream);
        let mut got = Vec::new();
        while let Some(f) = d.next_frame() {
            got.push(f);
        }
        got.extend(d.finish());
        assert_eq!(got.last(), Some(&target), "stream {}", hex::encode(&stream));
    }
}

#[test]
fn roster_is_capped_at_thirty() {
    let mut m = Master::new(NetworkConfig::default());
    for addr in 0..MAX_STATIONS as u8 {
        m.register(addr, format!("s{addr}"), DEFAULT_PASSWORD).unwrap();
    }
    assert_eq!(m.roster().len(), 30);
    assert!(matches!(m.register(30, "s30", DEFAULT_PASSWORD), Err(NetError::BadAddress(30))));
    assert!(matches!(m.register(4, "again", DEFAULT_PASSWORD), Err(NetError::DuplicateAddress(4))));
    assert_eq!(m.roster().len(), 30);
}

fn record(seq: u32) -> EventRecord {
    EventRecord { seq, station: 1, kind: EventKind::TagEnter, uid: None, sim_timestamp_us: seq as u64 }
}

#[test]
fn ring_keeps_newest_255() {
    let mut ring = EventRing::default();
    let mut crossings = 0;
    for seq in 1..=300 {
        crossings += ring.push(record(seq)).crossed_threshold as usize;
    }
    let kept: Vec<u32> = ring.iter().map(|r| r.seq).collect();
    assert_eq!(kept, (46..=300).collect::<Vec<_>>());
    assert_eq!(crossings, 1);
}

#[test]
fn overrun_warning_once_per_crossing() {
    let mut ring = EventRing::default();
    let mut seq = 0;
    let mut crossings = Vec::new();
    for round in 0..3 {
        for _ in 0..240 {
            seq += 1;
            if ring.push(record(seq)).crossed_threshold {
                crossings.push((round, ring.len()));
            }
        }
        ring.acknowledge(seq - 10);
    }
    // 230 of 255 is the first length at or above 90%.
    assert_eq!(crossings, vec![(0, 230), (1, 230), (2, 230)]);
}

#[test]
fn station_journals_one_warning_per_crossing() {
    let mut s = Station::new(1, "gate", 1);
    for i in 0..300 {
        s.record(EventKind::TagEnter, None, i);
    }
    let warnings = s.ring().iter().filter(|r| r.kind == EventKind::BufferOverrunWarning).count();
    assert_eq!(warnings, 1);
    assert_eq!(s.last_seq(), 301);
    assert_eq!(s.ring().len(), 255);
}

fn bus_with_tag() -> (SimBus, Master, Uid) {
    let mut bus = SimBus::new(World::new(SlotTiming::default()));
    bus.add_station(Station::new(3, "dock", 3), FieldGeometry::LONG).unwrap();
    let uid = Uid::from_serial(42);
    bus.add_tag(TagEmulation::new(uid).at(3, 10.0)).unwrap();
    let mut m = Master::new(NetworkConfig::default());
    m.register(3, "dock", DEFAULT_PASSWORD).unwrap();
    (bus, m, uid)
}

#[test]
fn default_timing_read_rate_within_envelope() {
    let (mut bus, mut m, uid) = bus_with_tag();
    let start = bus.world().clock_us();
    let reads = 1_000;
    for _ in 0..reads {
        m.read_blocks(&mut bus, 3, uid, 0, 1).unwrap();
    }
    let elapsed = (bus.world().clock_us() - start) as f64 / 1e6;
    let rate = reads as f64 / elapsed;
    assert!((40.0..=200.0).contains(&rate), "{rate} reads/s");
}

#[test]
fn poll_drains_and_acknowledges_events() {
    let (mut bus, mut m, uid) = bus_with_tag();
    bus.move_tag(uid, 80.0).unwrap();
    bus.move_tag(uid, 5.0).unwrap();
    let first = m.poll_cycle(&mut bus);
    let kinds: Vec<EventKind> = first.events.iter().map(|e| e.kind).collect();
    assert_eq!(kinds, vec![EventKind::TagEnter, EventKind::TagLeave, EventKind::TagEnter]);
    assert!(m.poll_cycle(&mut bus).events.is_empty());
}
