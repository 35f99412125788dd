//! Shared domain types: node identity, the Adjacent Information Table (AIT)
//! and the protocol message set, together with their fixed-width wire
//! encodings.
//!
//! All integers and reals are big-endian. An AIT entry always occupies
//! exactly [`AIT_ENTRY_LEN`] bytes:
//!
//! | bytes  | field                                   |
//! |--------|-----------------------------------------|
//! | 0..4   | node id, `u32`                          |
//! | 4..8   | IPv4 octets in textual order            |
//! | 8..16  | remaining storage capacity (MB), `f64`  |
//! | 16..24 | processing power (MHz), `f64`           |
//! | 24..32 | reserved, written as zero, ignored      |

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Encoded size of one AIT entry.
pub const AIT_ENTRY_LEN: usize = 32;

/// Length of the message header: one kind byte plus the sender entry.
pub const MESSAGE_HEADER_LEN: usize = 1 + AIT_ENTRY_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("wrong length: expected {expected} bytes, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("unknown message kind byte {0:#04x}")]
    UnknownKind(u8),
}

/// Identifier of a storage node. Zero is the "no node" sentinel.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const NONE: NodeId = NodeId(0);

    pub fn is_none(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of a physical domain (a network segment).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct DomainId(pub u16);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One row of the Adjacent Information Table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AitEntry {
    pub node_id: NodeId,
    pub ip: Ipv4Addr,
    pub storage_capacity_mb: f64,
    pub processing_power_mhz: f64,
}

impl AitEntry {
    /// Builds a validated entry.
    pub fn new(
        node_id: NodeId,
        ip: Ipv4Addr,
        storage_capacity_mb: f64,
        processing_power_mhz: f64,
    ) -> Result<Self, ModelError> {
        let entry = AitEntry {
            node_id,
            ip,
            storage_capacity_mb,
            processing_power_mhz,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.node_id.is_none() {
            return Err(ModelError::InvalidValue("node id 0 is reserved".into()));
        }
        if !self.storage_capacity_mb.is_finite() || self.storage_capacity_mb < 0.0 {
            return Err(ModelError::InvalidValue(format!(
                "storage capacity must be finite and >= 0, got {}",
                self.storage_capacity_mb
            )));
        }
        if !self.processing_power_mhz.is_finite() || self.processing_power_mhz <= 0.0 {
            return Err(ModelError::InvalidValue(format!(
                "processing power must be finite and > 0, got {}",
                self.processing_power_mhz
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; AIT_ENTRY_LEN] {
        encode_ait_entry(self)
    }
}

pub fn encode_ait_entry(entry: &AitEntry) -> [u8; AIT_ENTRY_LEN] {
    let mut out = [0u8; AIT_ENTRY_LEN];
    out[0..4].copy_from_slice(&entry.node_id.0.to_be_bytes());
    out[4..8].copy_from_slice(&entry.ip.octets());
    out[8..16].copy_from_slice(&entry.storage_capacity_mb.to_be_bytes());
    out[16..24].copy_from_slice(&entry.processing_power_mhz.to_be_bytes());
    out
}

pub fn decode_ait_entry(block: &[u8]) -> Result<AitEntry, ModelError> {
    let block: &[u8; AIT_ENTRY_LEN] = block.try_into().map_err(|_| ModelError::WrongLength {
        expected: AIT_ENTRY_LEN,
        actual: block.len(),
    })?;
    let entry = AitEntry {
        node_id: NodeId(u32::from_be_bytes(block[0..4].try_into().unwrap())),
        ip: Ipv4Addr::new(block[4], block[5], block[6], block[7]),
        storage_capacity_mb: f64::from_be_bytes(block[8..16].try_into().unwrap()),
        processing_power_mhz: f64::from_be_bytes(block[16..24].try_into().unwrap()),
    };
    entry.validate()?;
    Ok(entry)
}

/// Adjacent Information Table: what a node knows about its domain peers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ait {
    entries: BTreeMap<NodeId, AitEntry>,
}

impl Ait {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the entry for `entry.node_id`. Returns `true` if
    /// the id was not present before.
    pub fn upsert(&mut self, entry: AitEntry) -> bool {
        self.entries.insert(entry.node_id, entry).is_none()
    }

    pub fn remove(&mut self, id: NodeId) -> Option<AitEntry> {
        self.entries.remove(&id)
    }

    pub fn get(&self, id: NodeId) -> Option<&AitEntry> {
        self.entries.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Entries in ascending node id order.
    pub fn entries(&self) -> impl Iterator<Item = &AitEntry> {
        self.entries.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.keys().copied()
    }

    /// In-memory footprint of the table, 32 bytes per entry.
    pub fn size_bytes(&self) -> usize {
        AIT_ENTRY_LEN * self.entries.len()
    }

    /// Concatenated entry encodings in node id order.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size_bytes());
        for entry in self.entries.values() {
            out.extend_from_slice(&entry.encode());
        }
        out
    }
}

impl FromIterator<AitEntry> for Ait {
    fn from_iter<I: IntoIterator<Item = AitEntry>>(iter: I) -> Self {
        let mut ait = Ait::new();
        for e in iter {
            ait.upsert(e);
        }
        ait
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum MessageKind {
    Join = 0x01,
    Accept = 0x02,
    Leave = 0x03,
    Heartbeat = 0x04,
    AgentAnnounce = 0x05,
    Query = 0x06,
    QueryResp = 0x07,
    Data = 0x08,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Result<Self, ModelError> {
        Ok(match b {
            0x01 => MessageKind::Join,
            0x02 => MessageKind::Accept,
            0x03 => MessageKind::Leave,
            0x04 => MessageKind::Heartbeat,
            0x05 => MessageKind::AgentAnnounce,
            0x06 => MessageKind::Query,
            0x07 => MessageKind::QueryResp,
            0x08 => MessageKind::Data,
            other => return Err(ModelError::UnknownKind(other)),
        })
    }

    /// Payload length that follows the 33-byte header.
    pub fn payload_len(self) -> usize {
        match self {
            MessageKind::Join
            | MessageKind::Accept
            | MessageKind::Leave
            | MessageKind::Heartbeat
            | MessageKind::AgentAnnounce => 0,
            MessageKind::Query => 16,
            MessageKind::QueryResp => 8 + AIT_ENTRY_LEN,
            MessageKind::Data => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Join => "JOIN",
            MessageKind::Accept => "ACCEPT",
            MessageKind::Leave => "LEAVE",
            MessageKind::Heartbeat => "HEARTBEAT",
            MessageKind::AgentAnnounce => "AGENT_ANNOUNCE",
            MessageKind::Query => "QUERY",
            MessageKind::QueryResp => "QUERY_RESP",
            MessageKind::Data => "DATA",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kind-specific message body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Body {
    Join,
    Accept,
    Leave,
    Heartbeat,
    AgentAnnounce,
    Query {
        query_id: u64,
        required_mb: f64,
    },
    /// `candidate` is `None` when the responder has nothing suitable; it is
    /// encoded as 32 zero bytes.
    QueryResp {
        query_id: u64,
        candidate: Option<AitEntry>,
    },
    /// Stands in for a bulk data body of `size_mb` megabytes.
    Data {
        size_mb: f64,
    },
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::Join => MessageKind::Join,
            Body::Accept => MessageKind::Accept,
            Body::Leave => MessageKind::Leave,
            Body::Heartbeat => MessageKind::Heartbeat,
            Body::AgentAnnounce => MessageKind::AgentAnnounce,
            Body::Query { .. } => MessageKind::Query,
            Body::QueryResp { .. } => MessageKind::QueryResp,
            Body::Data { .. } => MessageKind::Data,
        }
    }
}

/// A protocol datagram: kind byte, 32-byte sender snapshot, then the body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Message {
    pub sender: AitEntry,
    pub body: Body,
}

impl Message {
    pub fn new(sender: AitEntry, body: Body) -> Self {
        Message { sender, body }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    pub fn encoded_len(&self) -> usize {
        MESSAGE_HEADER_LEN + self.kind().payload_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.kind() as u8);
        out.extend_from_slice(&self.sender.encode());
        match self.body {
            Body::Query {
                query_id,
                required_mb,
            } => {
                out.extend_from_slice(&query_id.to_be_bytes());
                out.extend_from_slice(&required_mb.to_be_bytes());
            }
            Body::QueryResp {
                query_id,
                candidate,
            } => {
                out.extend_from_slice(&query_id.to_be_bytes());
                match candidate {
                    Some(c) => out.extend_from_slice(&c.encode()),
                    None => out.extend_from_slice(&[0u8; AIT_ENTRY_LEN]),
                }
            }
            Body::Data { size_mb } => out.extend_from_slice(&size_mb.to_be_bytes()),
            _ => {}
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let first = *bytes.first().ok_or(ModelError::WrongLength {
            expected: MESSAGE_HEADER_LEN,
            actual: 0,
        })?;
        let kind = MessageKind::from_byte(first)?;
        let expected = MESSAGE_HEADER_LEN + kind.payload_len();
        if bytes.len() != expected {
            return Err(ModelError::WrongLength {
                expected,
                actual: bytes.len(),
            });
        }
        let sender = decode_ait_entry(&bytes[1..MESSAGE_HEADER_LEN])?;
        let payload = &bytes[MESSAGE_HEADER_LEN..];
        let u64_at = |i: usize| u64::from_be_bytes(payload[i..i + 8].try_into().unwrap());
        let f64_at = |i: usize| f64::from_be_bytes(payload[i..i + 8].try_into().unwrap());
        let body = match kind {
            MessageKind::Join => Body::Join,
            MessageKind::Accept => Body::Accept,
            MessageKind::Leave => Body::Leave,
            MessageKind::Heartbeat => Body::Heartbeat,
            MessageKind::AgentAnnounce => Body::AgentAnnounce,
            MessageKind::Query => {
                let required_mb = f64_at(8);
                if !(required_mb.is_finite() && required_mb > 0.0) {
                    return Err(ModelError::InvalidValue(format!(
                        "required_mb must be > 0, got {required_mb}"
                    )));
                }
                Body::Query {
                    query_id: u64_at(0),
                    required_mb,
                }
            }
            MessageKind::QueryResp => {
                let block = &payload[8..8 + AIT_ENTRY_LEN];
                let candidate = if block.iter().all(|&b| b == 0) {
                    None
                } else {
                    Some(decode_ait_entry(block)?)
                };
                Body::QueryResp {
                    query_id: u64_at(0),
                    candidate,
                }
            }
            MessageKind::Data => {
                let size_mb = f64_at(0);
                if !(size_mb.is_finite() && size_mb >= 0.0) {
                    return Err(ModelError::InvalidValue(format!(
                        "size_mb must be >= 0, got {size_mb}"
                    )));
                }
                Body::Data { size_mb }
            }
        };
        Ok(Message { sender, body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(id: u32, ip: [u8; 4], cap: f64, power: f64) -> AitEntry {
        AitEntry::new(NodeId(id), Ipv4Addr::from(ip), cap, power).unwrap()
    }

    fn hex(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    #[test]
    fn encodes_reference_entry() {
        // Expected bytes produced independently with Python's
        // struct.pack('>I4Bdd8x', ...).
        let e = entry(1, [192, 168, 16, 10], 1024.0, 2800.0);
        let bytes = encode_ait_entry(&e);
        assert_eq!(&bytes[..8], &[0x00, 0x00, 0x00, 0x01, 0xC0, 0xA8, 0x10, 0x0A]);
        assert_eq!(
            hex(&bytes),
            "00000001c0a8100a409000000000000040a5e000000000000000000000000000"
        );
    }

    #[test]
    fn zero_fields_encode_to_zero_bytes() {
        let e = entry(1, [0, 0, 0, 0], 0.0, 1.0);
        let bytes = e.encode();
        assert!(bytes[4..16].iter().all(|&b| b == 0));
        assert!(bytes[24..32].iter().all(|&b| b == 0));
    }

    #[test]
    fn decodes_round_trip_example() {
        let e = entry(7, [10, 0, 0, 1], 512.5, 2660.0);
        let bytes = e.encode();
        assert_eq!(
            hex(&bytes),
            "000000070a000001408004000000000040a4c800000000000000000000000000"
        );
        assert_eq!(decode_ait_entry(&bytes).unwrap(), e);
    }

    #[test]
    fn decode_rejects_bad_blocks() {
        assert_eq!(
            decode_ait_entry(&[0u8; 31]),
            Err(ModelError::WrongLength {
                expected: 32,
                actual: 31
            })
        );
        let mut bytes = entry(5, [1, 2, 3, 4], 10.0, 10.0).encode();
        bytes[0..4].copy_from_slice(&[0; 4]);
        assert!(matches!(decode_ait_entry(&bytes), Err(ModelError::InvalidValue(_))));

        let mut neg = entry(5, [1, 2, 3, 4], 10.0, 10.0).encode();
        neg[8..16].copy_from_slice(&(-1.0f64).to_be_bytes());
        assert!(matches!(decode_ait_entry(&neg), Err(ModelError::InvalidValue(_))));

        let mut nan = entry(5, [1, 2, 3, 4], 10.0, 10.0).encode();
        nan[16..24].copy_from_slice(&f64::NAN.to_be_bytes());
        assert!(matches!(decode_ait_entry(&nan), Err(ModelError::InvalidValue(_))));

        let mut zero_power = entry(5, [1, 2, 3, 4], 10.0, 10.0).encode();
        zero_power[16..24].copy_from_slice(&0.0f64.to_be_bytes());
        assert!(matches!(decode_ait_entry(&zero_power), Err(ModelError::InvalidValue(_))));
    }

    #[test]
    fn padding_is_ignored_on_read() {
        let e = entry(9, [10, 1, 1, 9], 3.0, 4.0);
        let mut bytes = e.encode();
        bytes[24..].copy_from_slice(&[0xAB; 8]);
        assert_eq!(decode_ait_entry(&bytes).unwrap(), e);
    }

    #[test]
    fn ait_upsert_and_remove() {
        let mut ait = Ait::new();
        assert!(ait.upsert(entry(1, [10, 0, 0, 1], 100.0, 2800.0)));
        assert_eq!(ait.len(), 1);

        assert!(!ait.upsert(entry(1, [10, 0, 0, 1], 50.0, 2800.0)));
        assert_eq!(ait.len(), 1);
        assert_eq!(ait.get(NodeId(1)).unwrap().storage_capacity_mb, 50.0);

        ait.upsert(entry(2, [10, 0, 0, 2], 1.0, 1.0));
        ait.upsert(entry(3, [10, 0, 0, 3], 1.0, 1.0));
        assert_eq!(ait.size_bytes(), 96);
        ait.remove(NodeId(2));
        assert_eq!(ait.len(), 2);
        let before = ait.clone();
        ait.remove(NodeId(42));
        assert_eq!(ait, before);

        ait.upsert(entry(2, [10, 0, 0, 2], 1.0, 1.0));
        assert!(ait.contains(NodeId(2)));
    }

    #[test]
    fn thousand_entries_take_32000_bytes() {
        let ait: Ait = (1..=1000u32)
            .map(|i| entry(i, [10, 0, (i >> 8) as u8, i as u8], i as f64, 2800.0))
            .collect();
        assert_eq!(ait.size_bytes(), 32_000);
        assert_eq!(ait.encode().len(), 32_000);
        assert_eq!(Ait::new().size_bytes(), 0);
    }

    #[test]
    fn message_lengths_follow_kind() {
        let s = entry(3, [192, 168, 16, 12], 10.0, 2660.0);
        let cases = [
            (Body::Join, 33),
            (Body::Accept, 33),
            (Body::Leave, 33),
            (Body::Heartbeat, 33),
            (Body::AgentAnnounce, 33),
            (
                Body::Query {
                    query_id: 9,
                    required_mb: 5.0,
                },
                49,
            ),
            (
                Body::QueryResp {
                    query_id: 9,
                    candidate: None,
                },
                73,
            ),
            (Body::Data { size_mb: 100.0 }, 41),
        ];
        for (body, len) in cases {
            let m = Message::new(s, body);
            let bytes = m.encode();
            assert_eq!(bytes.len(), len, "{}", m.kind());
            assert_eq!(m.encoded_len(), len);
            assert_eq!(bytes[0], m.kind() as u8);
            assert_eq!(Message::decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn message_decode_errors() {
        let s = entry(3, [192, 168, 16, 12], 10.0, 2660.0);
        let mut bytes = Message::new(s, Body::Heartbeat).encode();
        bytes[0] = 0x09;
        assert_eq!(Message::decode(&bytes), Err(ModelError::UnknownKind(0x09)));
        let mut bytes = Message::new(s, Body::Heartbeat).encode();
        bytes.push(0);
        assert!(matches!(
            Message::decode(&bytes),
            Err(ModelError::WrongLength { expected: 33, actual: 34 })
        ));
        assert!(Message::decode(&[]).is_err());
    }

    fn arb_entry() -> impl Strategy<Value = AitEntry> {
        (
            1u32..,
            any::<[u8; 4]>(),
            0.0f64..1e12,
            (1e-6f64..1e9),
        )
            .prop_map(|(id, ip, cap, power)| entry(id, ip, cap, power))
    }

    proptest! {
        #[test]
        fn entry_round_trips(e in arb_entry()) {
            let bytes = e.encode();
            prop_assert_eq!(bytes.len(), AIT_ENTRY_LEN);
            prop_assert_eq!(decode_ait_entry(&bytes).unwrap(), e);
        }

        #[test]
        fn size_law_and_idempotence(
            ops in prop::collection::vec((any::<bool>(), 1u32..40, 0.0f64..100.0), 0..200)
        ) {
            let mut ait = Ait::new();
            for (insert, id, cap) in ops {
                let e = entry(id, [10, 0, 0, id as u8], cap, 1.0);
                if insert {
                    ait.upsert(e);
                    let once = ait.clone();
                    ait.upsert(e);
                    prop_assert_eq!(&ait, &once);
                } else {
                    ait.remove(NodeId(id));
                    let once = ait.clone();
                    ait.remove(NodeId(id));
                    prop_assert_eq!(&ait, &once);
                }
                prop_assert_eq!(ait.size_bytes(), 32 * ait.len());
                prop_assert_eq!(ait.encode().len(), ait.size_bytes());
            }
        }
    }
}
