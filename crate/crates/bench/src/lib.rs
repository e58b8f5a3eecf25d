//! Deterministic workloads shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfidtrace_core::{FieldDef, FieldType, FieldValue, Frame, TagEmulation, TagPayload, Template, Uid};

/// A template with one field of each type and a matching payload.
pub fn asset_record() -> (Template, TagPayload) {
    let template = Template::new(
        7,
        1,
        "asset",
        vec![
            FieldDef::new("grade", FieldType::Character),
            FieldDef::new("qty", FieldType::Integer),
            FieldDef::new("price", FieldType::Real),
            FieldDef::new("loc", FieldType::String { max_len: 32 }),
        ],
    )
    .expect("asset template is valid");
    let payload = TagPayload::new(
        &template,
        vec![
            FieldValue::Character(b'A'),
            FieldValue::Integer(1200),
            FieldValue::Real(4.5),
            FieldValue::Text(b"warehouse 2, aisle 14".to_vec()),
        ],
    );
    (template, payload)
}

/// `n` distinct tags in front of reader 1, all within a few centimetres.
pub fn tag_population(n: usize, seed: u64) -> Vec<TagEmulation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut serials = std::collections::BTreeSet::new();
    while serials.len() < n {
        serials.insert(rng.gen::<u64>() & 0x00FF_FFFF_FFFF_FFFF);
    }
    serials.into_iter().map(|s| TagEmulation::new(Uid::from_serial(s)).at(1, rng.gen_range(0.0..5.0))).collect()
}

/// Encoded frames interleaved with line noise that never contains a start byte.
pub fn noisy_stream(frames: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..frames {
        out.extend((0..rng.gen_range(0..8)).map(|_| rng.gen_range(0..0xAAu8)));
        let payload = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
        out.extend(Frame { addr: rng.gen_range(0..30), cmd: 0x91, payload }.encode());
    }
    out
}
