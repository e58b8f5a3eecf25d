//! RFID traceability core: tag data templates and their binary codec, a
//! simulated air interface with anti-collision, the fixed-reader station
//! network, the central store with reports and alarms, handheld sync, and
//! the control-plane API that ties them together.

pub mod codec;
pub mod crc;
pub mod net;
pub mod rf;
pub mod service;
pub mod store;
pub mod sync;

pub use codec::{
    blocks_for, decode, encode, encoded_size, unblock, CodecError, FieldDef, FieldType, FieldValue, TagPayload,
    Template, TemplateRegistry,
};
pub use net::{
    frame_decode, frame_encode, EventKind, EventRecord, EventRing, Frame, FrameDecoder, FrameError, Master, NetError,
    SimBus, Station,
};
pub use rf::{inventory, FieldGeometry, InventoryResult, RfError, SlotTiming, TagEmulation, Uid, World};
pub use service::{ApiError, JournalQuery, Request, Service, ServiceConfig, WorldFile};
pub use store::{Datastore, ReportPattern, Role, StoreError, TableSet};
pub use sync::{sync_session, DeviceAgent, DeviceLink, SyncError, SyncReport};
