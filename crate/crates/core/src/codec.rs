//! User-defined tag templates and the binary payload layout written into tag memory.
//!
//! Encoded layout (all multi-byte integers little-endian):
//!
//! ```text
//! +------+-------------+---------+-------------+------------------+--------+
//! | 0x54 | template_id | version | body_length | body             | crc16  |
//! | 1 B  | 2 B         | 1 B     | 2 B         | body_length B    | 2 B    |
//! +------+-------------+---------+-------------+------------------+--------+
//! ```
//!
//! The body holds the fields in declaration order with fixed widths:
//! CHARACTER = 1, INTEGER = 4 (i32), REAL = 8 (f64), STRING(n) = 2-byte used
//! length followed by `n` content bytes, zero padded. The CRC is
//! CRC-16/CCITT-FALSE over header and body.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crc::crc16;

pub const MAGIC: u8 = 0x54;
pub const HEADER_LEN: usize = 6;
pub const TRAILER_LEN: usize = 2;
pub const MAX_STRING_LEN: usize = 208;
pub const MAX_FIELD_NAME_LEN: usize = 32;
/// Memory of the default tag: 64 blocks of 4 bytes.
pub const DEFAULT_TAG_CAPACITY: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("template {id} version {version} is already registered")]
    DuplicateTemplate { id: u16, version: u8 },
    #[error("field `{field}`: value does not match declared type {expected}")]
    TypeMismatch { field: String, expected: String },
    #[error("field `{field}`: {len} bytes exceeds max_len {max}")]
    Overflow { field: String, len: usize, max: usize },
    #[error("payload has {got} values but template has {expected} fields")]
    FieldCountMismatch { expected: usize, got: usize },
    #[error("payload is for template {payload:?}, not {template:?}")]
    TemplateMismatch { payload: (u16, u8), template: (u16, u8) },
    #[error("{needed} bytes do not fit a capacity of {capacity}")]
    CapacityExceeded { needed: usize, capacity: usize },
    #[error("bad magic byte 0x{0:02X}")]
    BadMagic(u8),
    #[error("unknown template {0} version {1}")]
    UnknownTemplate(u16, u8),
    #[error("crc mismatch: stored 0x{stored:04X}, computed 0x{computed:04X}")]
    CrcMismatch { stored: u16, computed: u16 },
    #[error("payload truncated: need {needed} bytes, have {have}")]
    TruncatedPayload { needed: usize, have: usize },
    #[error("malformed body: {0}")]
    MalformedBody(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldType {
    Character,
    /// Fixed-capacity byte string; `max_len` in 1..=208.
    String {
        max_len: usize,
    },
    Integer,
    Real,
}

impl FieldType {
    /// Bytes this field occupies in the body.
    pub fn width(&self) -> usize {
        match self {
            FieldType::Character => 1,
            FieldType::String { max_len } => 2 + max_len,
            FieldType::Integer => 4,
            FieldType::Real => 8,
        }
    }

    pub fn keyword(&self) -> &'static str {
        match self {
            FieldType::Character => "character",
            FieldType::String { .. } => "string",
            FieldType::Integer => "integer",
            FieldType::Real => "real",
        }
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldType::String { max_len } => write!(f, "string({max_len})"),
            other => f.write_str(other.keyword()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDef {
    pub name: String,
    pub ty: FieldType,
}

impl FieldDef {
    pub fn new(name: impl Into<String>, ty: FieldType) -> Self {
        FieldDef { name: name.into(), ty }
    }
}

/// A validated record schema. Construct through [`Template::new`] or
/// [`Template::from_toml`]; both enforce the naming and capacity invariants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    id: u16,
    version: u8,
    name: String,
    fields: Vec<FieldDef>,
}

impl Template {
    pub fn new(id: u16, version: u8, name: impl Into<String>, fields: Vec<FieldDef>) -> Result<Self, CodecError> {
        Self::with_capacity(id, version, name, fields, DEFAULT_TAG_CAPACITY)
    }

    /// Validates against a tag memory of `capacity` bytes.
    pub fn with_capacity(
        id: u16,
        version: u8,
        name: impl Into<String>,
        fields: Vec<FieldDef>,
        capacity: usize,
    ) -> Result<Self, CodecError> {
        let mut seen = std::collections::BTreeSet::new();
        for field in &fields {
            if field.name.is_empty() {
                return Err(CodecError::InvalidTemplate("empty field name".into()));
            }
            if field.name.len() > MAX_FIELD_NAME_LEN {
                return Err(CodecError::InvalidTemplate(format!(
                    "field name `{}` longer than {MAX_FIELD_NAME_LEN} bytes",
                    field.name
                )));
            }
            if !seen.insert(field.name.as_str()) {
                return Err(CodecError::InvalidTemplate(format!("duplicate field name `{}`", field.name)));
            }
            if let FieldType::String { max_len } = field.ty {
                if !(1..=MAX_STRING_LEN).contains(&max_len) {
                    return Err(CodecError::InvalidTemplate(format!(
                        "field `{}`: string max_len {max_len} outside 1..={MAX_STRING_LEN}",
                        field.name
                    )));
                }
            }
        }
        let template = Template { id, version, name: name.into(), fields };
        let needed = template.encoded_size();
        if needed > capacity {
            return Err(CodecError::CapacityExceeded { needed, capacity });
        }
        Ok(template)
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn version(&self) -> u8 {
        self.version
    }

    pub fn key(&self) -> (u16, u8) {
        (self.id, self.version)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn fields(&self) -> &[FieldDef] {
        &self.fields
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    fn body_len(&self) -> usize {
        self.fields.iter().map(|f| f.ty.width()).sum()
    }

    /// Total encoded length. Fixed per template since strings are padded.
    pub fn encoded_size(&self) -> usize {
        HEADER_LEN + self.body_len() + TRAILER_LEN
    }

    /// Parses a template definition document (see the README for the grammar).
    pub fn from_toml(text: &str) -> Result<Self, CodecError> {
        let doc: TemplateDoc = toml::from_str(text).map_err(|e| CodecError::InvalidTemplate(e.to_string()))?;
        doc.try_into()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&TemplateDoc::from(self)).expect("template document serializes")
    }
}

/// On-disk shape of a template definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateDoc {
    pub template_id: u16,
    pub version: u8,
    pub name: String,
    #[serde(default)]
    pub fields: Vec<FieldDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDoc {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

impl TryFrom<TemplateDoc> for Template {
    type Error = CodecError;

    fn try_from(doc: TemplateDoc) -> Result<Self, CodecError> {
        let mut fields = Vec::with_capacity(doc.fields.len());
        for f in doc.fields {
            let ty = match (f.ty.to_ascii_lowercase().as_str(), f.max_len) {
                ("character", None) => FieldType::Character,
                ("integer", None) => FieldType::Integer,
                ("real", None) => FieldType::Real,
                ("string", Some(max_len)) => FieldType::String { max_len },
                ("string", None) => {
                    return Err(CodecError::InvalidTemplate(format!("field `{}`: string requires max_len", f.name)))
                }
                (kw @ ("character" | "integer" | "real"), Some(_)) => {
                    return Err(CodecError::InvalidTemplate(format!(
                        "field `{}`: max_len is only valid for string, not {kw}",
                        f.name
                    )))
                }
                (other, _) => {
                    return Err(CodecError::InvalidTemplate(format!("field `{}`: unknown type `{other}`", f.name)))
                }
            };
            fields.push(FieldDef { name: f.name, ty });
        }
        Template::new(doc.template_id, doc.version, doc.name, fields)
    }
}

impl From<&Template> for TemplateDoc {
    fn from(t: &Template) -> Self {
        TemplateDoc {
            template_id: t.id,
            version: t.version,
            name: t.name.clone(),
            fields: t
                .fields
                .iter()
                .map(|f| FieldDoc {
                    name: f.name.clone(),
                    ty: f.ty.keyword().to_string(),
                    max_len: match f.ty {
                        FieldType::String { max_len } => Some(max_len),
                        _ => None,
                    },
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FieldValue {
    Character(u8),
    Text(Vec<u8>),
    Integer(i32),
    Real(f64),
}

// Reals compare by bit pattern so that roundtrip identity is exact, NaN included.
impl PartialEq for FieldValue {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (FieldValue::Character(a), FieldValue::Character(b)) => a == b,
            (FieldValue::Text(a), FieldValue::Text(b)) => a == b,
            (FieldValue::Integer(a), FieldValue::Integer(b)) => a == b,
            (FieldValue::Real(a), FieldValue::Real(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        }
    }
}

impl Eq for FieldValue {}

impl FieldValue {
    fn matches(&self, ty: &FieldType) -> bool {
        matches!(
            (self, ty),
            (FieldValue::Character(_), FieldType::Character)
                | (FieldValue::Text(_), FieldType::String { .. })
                | (FieldValue::Integer(_), FieldType::Integer)
                | (FieldValue::Real(_), FieldType::Real)
        )
    }

    /// Parses user text according to a field type. CHARACTER takes exactly one byte.
    pub fn parse(ty: &FieldType, text: &str) -> Result<Self, String> {
        match ty {
            FieldType::Character => match text.as_bytes() {
                [b] => Ok(FieldValue::Character(*b)),
                _ => Err(format!("expected a single character, got `{text}`")),
            },
            FieldType::String { .. } => Ok(FieldValue::Text(text.as_bytes().to_vec())),
            FieldType::Integer => {
                text.trim().parse::<i32>().map(FieldValue::Integer).map_err(|e| format!("`{text}`: {e}"))
            }
            FieldType::Real => text.trim().parse::<f64>().map(FieldValue::Real).map_err(|e| format!("`{text}`: {e}")),
        }
    }

    /// Converts a JSON scalar into a value of the given field type.
    pub fn from_json(ty: &FieldType, value: &serde_json::Value) -> Result<Self, String> {
        use serde_json::Value as J;
        match (ty, value) {
            (FieldType::Integer, J::Number(n)) => n
                .as_i64()
                .and_then(|v| i32::try_from(v).ok())
                .map(FieldValue::Integer)
                .ok_or_else(|| format!("{n} is not a 32-bit integer")),
            (FieldType::Real, J::Number(n)) => {
                n.as_f64().map(FieldValue::Real).ok_or_else(|| format!("{n} is not a real"))
            }
            (_, J::String(s)) => FieldValue::parse(ty, s),
            (ty, other) => Err(format!("cannot use {other} as {ty}")),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            FieldValue::Character(c) => serde_json::Value::String((*c as char).to_string()),
            FieldValue::Text(t) => serde_json::Value::String(String::from_utf8_lossy(t).into_owned()),
            FieldValue::Integer(i) => serde_json::Value::from(*i),
            FieldValue::Real(r) => serde_json::Value::from(*r),
        }
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Character(c) => write!(f, "{}", *c as char),
            FieldValue::Text(t) => f.write_str(&String::from_utf8_lossy(t)),
            FieldValue::Integer(i) => write!(f, "{i}"),
            FieldValue::Real(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagPayload {
    pub template_id: u16,
    pub version: u8,
    pub values: Vec<FieldValue>,
}

impl TagPayload {
    pub fn new(template: &Template, values: Vec<FieldValue>) -> Self {
        TagPayload { template_id: template.id, version: template.version, values }
    }
}

/// Registered templates keyed by `(template_id, version)`. A registered
/// version is immutable.
#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    templates: BTreeMap<(u16, u8), Template>,
}

impl TemplateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, template: Template) -> Result<(), CodecError> {
        let key = template.key();
        if self.templates.contains_key(&key) {
            return Err(CodecError::DuplicateTemplate { id: key.0, version: key.1 });
        }
        self.templates.insert(key, template);
        Ok(())
    }

    pub fn get(&self, id: u16, version: u8) -> Option<&Template> {
        self.templates.get(&(id, version))
    }

    pub fn remove(&mut self, id: u16, version: u8) -> Option<Template> {
        self.templates.remove(&(id, version))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.templates.values()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

impl FromIterator<Template> for TemplateRegistry {
    fn from_iter<I: IntoIterator<Item = Template>>(iter: I) -> Self {
        TemplateRegistry { templates: iter.into_iter().map(|t| (t.key(), t)).collect() }
    }
}

pub fn encoded_size(template: &Template) -> usize {
    template.encoded_size()
}

pub fn encode(template: &Template, payload: &TagPayload) -> Result<Vec<u8>, CodecError> {
    if (payload.template_id, payload.version) != template.key() {
        return Err(CodecError::TemplateMismatch {
            payload: (payload.template_id, payload.version),
            template: template.key(),
        });
    }
    if payload.values.len() != template.fields.len() {
        return Err(CodecError::FieldCountMismatch { expected: template.fields.len(), got: payload.values.len() });
    }

    let body_len = template.body_len();
    let mut out = Vec::with_capacity(template.encoded_size());
    out.push(MAGIC);
    out.extend_from_slice(&template.id.to_le_bytes());
    out.push(template.version);
    out.extend_from_slice(&(body_len as u16).to_le_bytes());

    for (field, value) in template.fields.iter().zip(&payload.values) {
        if !value.matches(&field.ty) {
            return Err(CodecError::TypeMismatch { field: field.name.clone(), expected: field.ty.to_string() });
        }
        match (value, field.ty) {
            (FieldValue::Character(c), _) => out.push(*c),
            (FieldValue::Integer(i), _) => out.extend_from_slice(&i.to_le_bytes()),
            (FieldValue::Real(r), _) => out.extend_from_slice(&r.to_le_bytes()),
            (FieldValue::Text(t), FieldType::String { max_len }) => {
                if t.len() > max_len {
                    return Err(CodecError::Overflow { field: field.name.clone(), len: t.len(), max: max_len });
                }
                out.extend_from_slice(&(t.len() as u16).to_le_bytes());
                out.extend_from_slice(t);
                out.resize(out.len() + (max_len - t.len()), 0);
            }
            (FieldValue::Text(_), _) => unreachable!("checked by matches()"),
        }
    }

    let crc = crc16(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes an exact encoded payload. Trailing bytes are rejected; use
/// [`unblock`] first when reading padded tag memory.
pub fn decode(bytes: &[u8], registry: &TemplateRegistry) -> Result<TagPayload, CodecError> {
    let Some(&magic) = bytes.first() else {
        return Err(CodecError::TruncatedPayload { needed: HEADER_LEN, have: 0 });
    };
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::TruncatedPayload { needed: HEADER_LEN, have: bytes.len() });
    }
    let body_len = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let total = HEADER_LEN + body_len + TRAILER_LEN;
    if bytes.len() < total {
        return Err(CodecError::TruncatedPayload { needed: total, have: bytes.len() });
    }
    if bytes.len() > total {
        return Err(CodecError::MalformedBody(format!("{} trailing bytes after checksum", bytes.len() - total)));
    }
    let covered = &bytes[..HEADER_LEN + body_len];
    let stored = u16::from_le_bytes([bytes[total - 2], bytes[total - 1]]);
    let computed = crc16(covered);
    if stored != computed {
        return Err(CodecError::CrcMismatch { stored, computed });
    }

    let id = u16::from_le_bytes([bytes[1], bytes[2]]);
    let version = bytes[3];
    let template = registry.get(id, version).ok_or(CodecError::UnknownTemplate(id, version))?;
    if template.body_len() != body_len {
        return Err(CodecError::MalformedBody(format!(
            "body_length {body_len} but template expects {}",
            template.body_len()
        )));
    }

    let mut body = &bytes[HEADER_LEN..HEADER_LEN + body_len];
    let mut values = Vec::with_capacity(template.fields.len());
    for field in &template.fields {
        let (chunk, rest) = body.split_at(field.ty.width());
        body = rest;
        let value = match field.ty {
            FieldType::Character => FieldValue::Character(chunk[0]),
            FieldType::Integer => FieldValue::Integer(i32::from_le_bytes(chunk.try_into().unwrap())),
            FieldType::Real => FieldValue::Real(f64::from_le_bytes(chunk.try_into().unwrap())),
            FieldType::String { max_len } => {
                let used = u16::from_le_bytes([chunk[0], chunk[1]]) as usize;
                if used > max_len {
                    return Err(CodecError::MalformedBody(format!(
                        "field `{}`: length {used} exceeds max_len {max_len}",
                        field.name
                    )));
                }
                let content = &chunk[2..];
                if content[used..].iter().any(|&b| b != 0) {
                    return Err(CodecError::MalformedBody(format!("field `{}`: non-zero padding", field.name)));
                }
                FieldValue::Text(content[..used].to_vec())
            }
        };
        values.push(value);
    }
    Ok(TagPayload { template_id: id, version, values })
}

/// Splits `bytes` into `block_size` images, zero-padding the last one.
pub fn blocks_for(bytes: &[u8], block_size: usize, max_blocks: usize) -> Result<Vec<Vec<u8>>, CodecError> {
    assert!(block_size >= 1, "block_size must be at least 1");
    let count = bytes.len().div_ceil(block_size);
    if count > max_blocks {
        return Err(CodecError::CapacityExceeded { needed: bytes.len(), capacity: max_blocks * block_size });
    }
    Ok(bytes
        .chunks(block_size)
        .map(|chunk| {
            let mut block = chunk.to_vec();
            block.resize(block_size, 0);
            block
        })
        .collect())
}

/// Inverse of [`blocks_for`]: joins block images and strips padding using the
/// header's body_length.
pub fn unblock<B: AsRef<[u8]>>(blocks: &[B]) -> Result<Vec<u8>, CodecError> {
    let flat: Vec<u8> = blocks.iter().flat_map(|b| b.as_ref().iter().copied()).collect();
    if flat.is_empty() {
        return Ok(flat);
    }
    if flat[0] != MAGIC {
        return Err(CodecError::BadMagic(flat[0]));
    }
    if flat.len() < HEADER_LEN {
        return Err(CodecError::TruncatedPayload { needed: HEADER_LEN, have: flat.len() });
    }
    let total = HEADER_LEN + u16::from_le_bytes([flat[4], flat[5]]) as usize + TRAILER_LEN;
    if flat.len() < total {
        return Err(CodecError::TruncatedPayload { needed: total, have: flat.len() });
    }
    Ok(flat[..total].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn sizes() {
        assert_eq!(Template::new(1, 0, "e", vec![]).unwrap().encoded_size(), 8);
        let qty = Template::new(1, 0, "q", vec![FieldDef::new("qty", FieldType::Integer)]).unwrap();
        assert_eq!(encoded_size(&qty), 12);
        assert_eq!(asset().encoded_size(), 30);
    }

    #[test]
    fn template_validation() {
        let dup =
            Template::new(1, 0, "d", vec![FieldDef::new("a", FieldType::Integer), FieldDef::new("a", FieldType::Real)]);
        assert!(matches!(dup, Err(CodecError::InvalidTemplate(_))));
        let empty = Template::new(1, 0, "d", vec![FieldDef::new("", FieldType::Integer)]);
        assert!(matches!(empty, Err(CodecError::InvalidTemplate(_))));
        let long = Template::new(1, 0, "d", vec![FieldDef::new("x".repeat(33), FieldType::Integer)]);
        assert!(matches!(long, Err(CodecError::InvalidTemplate(_))));
        let zero = Template::new(1, 0, "d", vec![FieldDef::new("s", FieldType::String { max_len: 0 })]);
        assert!(matches!(zero, Err(CodecError::InvalidTemplate(_))));
        let max = Template::new(1, 0, "d", vec![FieldDef::new("s", FieldType::String { max_len: 208 })]);
        assert_eq!(max.unwrap().encoded_size(), 218);
        let too_big = Template::new(
            1,
            0,
            "d",
            vec![
                FieldDef::new("s", FieldType::String { max_len: 208 }),
                FieldDef::new("t", FieldType::String { max_len: 40 }),
            ],
        );
        assert!(matches!(too_big, Err(CodecError::CapacityExceeded { needed: 260, capacity: 256 })));
    }

    #[test]
    fn encode_errors() {
        let t = asset();
        let wrong_type =
            TagPayload::new(&t, vec![FieldValue::Integer(1), FieldValue::Integer(1), FieldValue::Real(1.0)]);
        assert!(matches!(encode(&t, &wrong_type), Err(CodecError::TypeMismatch { .. })));
        let too_long = TagPayload::new(
            &t,
            vec![FieldValue::Text(b"123456789".to_vec()), FieldValue::Integer(1), FieldValue::Real(1.0)],
        );
        assert!(matches!(encode(&t, &too_long), Err(CodecError::Overflow { len: 9, max: 8, .. })));
        let short = TagPayload::new(&t, vec![FieldValue::Integer(1)]);
        assert!(matches!(encode(&t, &short), Err(CodecError::FieldCountMismatch { .. })));
    }

    #[test]
    fn integer_zero_body() {
        let t = Template::new(1, 0, "q", vec![FieldDef::new("qty", FieldType::Integer)]).unwrap();
        let bytes = encode(&t, &TagPayload::new(&t, vec![FieldValue::Integer(0)])).unwrap();
        assert_eq!(&bytes[6..10], &[0, 0, 0, 0]);
    }

    #[test]
    fn decode_errors() {
        let t = asset();
        let reg: TemplateRegistry = [t.clone()].into_iter().collect();
        let p =
            TagPayload::new(&t, vec![FieldValue::Text(b"A3".to_vec()), FieldValue::Integer(12), FieldValue::Real(4.5)]);
        let bytes = encode(&t, &p).unwrap();
        assert_eq!(decode(&bytes, &reg).unwrap(), p);

        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0xFF;
        assert!(matches!(decode(&flipped, &reg), Err(CodecError::CrcMismatch { .. })));
        assert!(matches!(decode(&[0x00, 1, 2], &reg), Err(CodecError::BadMagic(0))));
        assert!(matches!(decode(&bytes[..10], &reg), Err(CodecError::TruncatedPayload { .. })));
        assert!(matches!(decode(&[], &reg), Err(CodecError::TruncatedPayload { .. })));
        assert!(matches!(decode(&bytes, &TemplateRegistry::new()), Err(CodecError::UnknownTemplate(7, 1))));
    }

    #[test]
    fn malformed_body_length_with_valid_crc() {
        let t = asset();
        let reg: TemplateRegistry = [t].into_iter().collect();
        let mut bytes = vec![MAGIC, 7, 0, 1, 2, 0, 0xAA, 0xBB];
        let crc = crc16(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes, &reg), Err(CodecError::MalformedBody(_))));
    }

    #[test]
    fn blocks() {
        let b = blocks_for(&[1; 10], 4, 64).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b[2], vec![1, 1, 0, 0]);
        assert_eq!(blocks_for(&[1; 8], 4, 64).unwrap().len(), 2);
        assert!(blocks_for(&[], 4, 64).unwrap().is_empty());
        assert!(matches!(blocks_for(&[1; 9], 4, 2), Err(CodecError::CapacityExceeded { .. })));
    }

    #[test]
    fn toml_document() {
        let text = r#"
            template_id = 7
            version = 1
            name = "asset"

            [[fields]]
            name = "loc"
            type = "string"
            max_len = 8

            [[fields]]
            name = "qty"
            type = "integer"

            [[fields]]
            name = "price"
            type = "real"
        "#;
        let t = Template::from_toml(text).unwrap();
        assert_eq!(t, asset());
        assert_eq!(Template::from_toml(&t.to_toml()).unwrap(), t);
        let bad = "template_id = 1\nversion = 0\nname = \"x\"\n[[fields]]\nname = \"a\"\ntype = \"date\"\n";
        assert!(Template::from_toml(bad).is_err());
    }
}
