use crc::{Crc, CRC_16_IBM_3740};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfidtrace_core::codec::MAX_STRING_LEN;
use rfidtrace_core::{
    blocks_for, decode, encode, unblock, CodecError, FieldDef, FieldType, FieldValue, TagPayload, Template,
    TemplateRegistry,
};

const CCITT_FALSE: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

/// Byte layout written out field by field, independent of the codec.
fn oracle_encode(t: &Template, values: &[FieldValue]) -> Vec<u8> {
    let mut body = Vec::new();
    for (f, v) in t.fields().iter().zip(values) {
        match (f.ty, v) {
            (FieldType::Character, FieldValue::Character(c)) => body.push(*c),
            (FieldType::Integer, FieldValue::Integer(i)) => body.extend(i.to_le_bytes()),
            (FieldType::Real, FieldValue::Real(r)) => body.extend(r.to_bits().to_le_bytes()),
            (FieldType::String { max_len }, FieldValue::Text(s)) => {
                body.extend((s.len() as u16).to_le_bytes());
                body.extend(s);
                body.extend(std::iter::repeat_n(0u8, max_len - s.len()));
            }
            other => panic!("value does not fit field: {other:?}"),
        }
    }
    let mut out = vec![0x54];
    out.extend(t.id().to_le_bytes());
    out.push(t.version());
    out.extend((body.len() as u16).to_le_bytes());
    out.extend(body);
    let crc = CCITT_FALSE.checksum(&out);
    out.extend(crc.to_le_bytes());
    out
}

fn field_type() -> impl Strategy<Value = FieldType> {
    prop_oneof![
        Just(FieldType::Character),
        Just(FieldType::Integer),
        Just(FieldType::Real),
        (1usize..=24).prop_map(|max_len| FieldType::String { max_len }),
    ]
}

fn value_for(ty: FieldType) -> BoxedStrategy<FieldValue> {
    match ty {
        FieldType::Character => any::<u8>().prop_map(FieldValue::Character).boxed(),
        FieldType::Integer => any::<i32>().prop_map(FieldValue::Integer).boxed(),
        FieldType::Real => any::<u64>().prop_map(|b| FieldValue::Real(f64::from_bits(b))).boxed(),
        FieldType::String { max_len } => {
            proptest::collection::vec(any::<u8>(), 0..=max_len).prop_map(FieldValue::Text).boxed()
        }
    }
}

fn template_and_values() -> impl Strategy<Value = (Template, Vec<FieldValue>)> {
    (any::<u16>(), any::<u8>(), proptest::collection::vec(field_type(), 0..8)).prop_flat_map(|(id, ver, types)| {
        let fields: Vec<FieldDef> =
            types.iter().enumerate().map(|(i, ty)| FieldDef::new(format!("f{i}"), *ty)).collect();
        let t = Template::new(id, ver, "generated", fields).unwrap();
        let values: Vec<BoxedStrategy<FieldValue>> = types.into_iter().map(value_for).collect();
        (Just(t), values)
    })
}

fn registry(t: &Template) -> TemplateRegistry {
    let mut r = TemplateRegistry::new();
    r.register(t.clone()).unwrap();
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn roundtrip_matches_layout((t, values) in template_and_values()) {
        let payload = TagPayload::new(&t, values.clone());
        let bytes = encode(&t, &payload).unwrap();
        prop_assert_eq!(bytes.len(), t.encoded_size());
        prop_assert_eq!(&bytes, &oracle_encode(&t, &values));
        prop_assert_eq!(decode(&bytes, &registry(&t)).unwrap(), payload);
    }

    #[test]
    fn block_split_roundtrip((t, values) in template_and_values(), block_size in 1usize..=32) {
        let bytes = encode(&t, &TagPayload::new(&t, values)).unwrap();
        let blocks = blocks_for(&bytes, block_size, 255).unwrap();
        prop_assert!(blocks.iter().all(|b| b.len() == block_size));
        prop_assert_eq!(unblock(&blocks).unwrap(), bytes);
    }

    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let t = Template::new(1, 0, "x", vec![FieldDef::new("a", FieldType::Integer)]).unwrap();
        let _ = decode(&bytes, &registry(&t));
    }
}

fn asset() -> Template {
    Template::new(
        7,
        1,
        "asset",
        vec![
            FieldDef::new("loc", FieldType::String { max_len: 8 }),
            FieldDef::new("qty", FieldType::Integer),
            FieldDef::new("price", FieldType::Real),
        ],
    )
    .unwrap()
}

#[test]
fn golden_payloads() {
    let empty = Template::new(1, 0, "empty", vec![]).unwrap();
    assert_eq!(encode(&empty, &TagPayload::new(&empty, vec![])).unwrap(), hex::decode("54010000000074d2").unwrap());

    let t = asset();
    let values = vec![FieldValue::Text(b"A3".to_vec()), FieldValue::Integer(12), FieldValue::Real(4.5)];
    let expected =
        hex::decode(concat!("540700011600", "02004133000000000000", "0c000000", "0000000000001240", "1b74")).unwrap();
    assert_eq!(encode(&t, &TagPayload::new(&t, values.clone())).unwrap(), expected);
    assert_eq!(oracle_encode(&t, &values), expected);
}

#[test]
fn crc_matches_reference_check_value() {
    assert_eq!(rfidtrace_core::crc::crc16(b"123456789"), 0x29B1);
    assert_eq!(CCITT_FALSE.checksum(b"123456789"), 0x29B1);
}

fn fixtures() -> Vec<(Template, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    (0..100u16)
        .map(|i| {
            let n = rng.gen_range(1..6);
            let mut fields = Vec::new();
            let mut values = Vec::new();
            for k in 0..n {
                let (ty, v) = match rng.gen_range(0..4) {
                    0 => (FieldType::Character, FieldValue::Character(rng.gen())),
                    1 => (FieldType::Integer, FieldValue::Integer(rng.gen())),
                    2 => (FieldType::Real, FieldValue::Real(rng.gen_range(-1e6..1e6))),
                    _ => {
                        let max_len = rng.gen_range(1..=16);
                        let len = rng.gen_range(0..=max_len);
                        (FieldType::String { max_len }, FieldValue::Text((0..len).map(|_| rng.gen()).collect()))
                    }
                };
                fields.push(FieldDef::new(format!("f{k}"), ty));
                values.push(v);
            }
            let t = Template::new(i, 1, "fixture", fields).unwrap();
            let bytes = encode(&t, &TagPayload::new(&t, values)).unwrap();
            (t, bytes)
        })
        .collect()
}

#[test]
fn every_single_byte_corruption_is_rejected() {
    for (t, bytes) in fixtures() {
        let reg = registry(&t);
        for pos in 0..bytes.len() {
            for delta in 1..=255u8 {
                let mut bad = bytes.clone();
                bad[pos] ^= delta;
                assert!(decode(&bad, &reg).is_err(), "template {} pos {pos} xor {delta:#04x} accepted", t.id());
            }
        }
    }
}

#[test]
fn template_limits() {
    let too_long = FieldType::String { max_len: MAX_STRING_LEN + 1 };
    assert!(matches!(
        Template::new(1, 0, "x", vec![FieldDef::new("s", too_long)]),
        Err(CodecError::InvalidTemplate(_))
    ));
    let widest = vec![FieldDef::new("s", FieldType::String { max_len: MAX_STRING_LEN })];
    assert_eq!(Template::new(1, 0, "x", widest).unwrap().encoded_size(), 6 + 210 + 2);
    let dup = vec![FieldDef::new("a", FieldType::Integer), FieldDef::new("a", FieldType::Real)];
    assert!(Template::new(1, 0, "x", dup).is_err());
    let over: Vec<_> = (0..33).map(|i| FieldDef::new(format!("r{i}"), FieldType::Real)).collect();
    assert!(matches!(Template::new(1, 0, "x", over), Err(CodecError::CapacityExceeded { .. })));
}

#[test]
fn string_overflow_and_unknown_template() {
    let t = asset();
    let long = vec![FieldValue::Text(b"ABCDEFGHI".to_vec()), FieldValue::Integer(0), FieldValue::Real(0.0)];
    assert!(matches!(encode(&t, &TagPayload::new(&t, long)), Err(CodecError::Overflow { .. })));
    let ok = vec![FieldValue::Text(vec![]), FieldValue::Integer(0), FieldValue::Real(0.0)];
    let bytes = encode(&t, &TagPayload::new(&t, ok)).unwrap();
    assert!(matches!(decode(&bytes, &TemplateRegistry::new()), Err(CodecError::UnknownTemplate(7, 1))));
}
