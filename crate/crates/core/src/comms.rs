//! Wire encoding and communication-cost accounting.
//!
//! Every message starts with a 10-byte header:
//!
//! | bytes | field          |
//! |-------|----------------|
//! | 0..4  | round (u32)    |
//! | 4..8  | client id (u32)|
//! | 8     | strategy tag   |
//! | 9     | payload kind   |
//!
//! Bodies by kind (all multi-byte numbers little-endian, floats are f32):
//!
//! * dense: `N: u32 ∥ N floats`
//! * sparse: `G: u32 ∥ bitmask ⌈G/8⌉ ∥ surviving floats ∥ v flag: u8 ∥ [G floats if flag = 1]`
//! * submodel: `U: u32 ∥ unit mask ⌈U/8⌉ ∥ retained floats`
//!
//! Bitmasks are packed LSB-first: slot `g` is bit `g % 8` of byte `g / 8`,
//! padding bits are zero. The number of floats in sparse and submodel
//! bodies follows from the mask and the [`MaskedLayout`] both ends share.

use std::collections::BTreeMap;

use crate::error::{FedError, Result};
use crate::nn::GroupLayout;
use crate::strategy::Strategy;

pub const HEADER_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Dense = 0,
    Sparse = 1,
    Submodel = 2,
}

impl PayloadKind {
    fn from_u8(b: u8) -> Result<Self> {
        match b {
            0 => Ok(PayloadKind::Dense),
            1 => Ok(PayloadKind::Sparse),
            2 => Ok(PayloadKind::Submodel),
            _ => Err(FedError::Protocol(format!("unknown payload kind {b}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub round: u32,
    pub client_id: u32,
    pub strategy: Strategy,
    pub kind: PayloadKind,
}

/// A framed message ready to be sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub header: Header,
    pub body: Vec<u8>,
}

impl WireMessage {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.body.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.header.round.to_le_bytes());
        out.extend_from_slice(&self.header.client_id.to_le_bytes());
        out.push(self.header.strategy.tag());
        out.push(self.header.kind as u8);
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(FedError::Protocol(format!("message of {} bytes has no header", bytes.len())));
        }
        let round = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
        let client_id = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let strategy = Strategy::from_tag(bytes[8])
            .ok_or_else(|| FedError::Protocol(format!("unknown strategy tag {}", bytes[8])))?;
        let kind = PayloadKind::from_u8(bytes[9])?;
        Ok(WireMessage {
            header: Header {
                round,
                client_id,
                strategy,
                kind,
            },
            body: bytes[HEADER_LEN..].to_vec(),
        })
    }

    fn expect_kind(&self, kind: PayloadKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(FedError::Protocol(format!(
                "expected a {kind:?} payload, got {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }
}

/// Which floats a masked body carries: slot `i` contributes `slot_sizes[i]`
/// values when its bit is set, and `always` values follow unconditionally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedLayout {
    pub slot_sizes: Vec<usize>,
    pub always: usize,
}

impl MaskedLayout {
    /// Groups are the slots and ungrouped coordinates are always sent.
    pub fn from_groups(layout: &GroupLayout) -> Self {
        MaskedLayout {
            slot_sizes: layout.group_sizes(),
            always: layout.ungrouped_len(),
        }
    }

    pub fn floats_for(&self, mask: &[bool]) -> usize {
        self.slot_sizes
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| s)
            .sum::<usize>()
            + self.always
    }
}

fn pack_bits(mask: &[bool], out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + mask.len().div_ceil(8), 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out[start + i / 8] |= 1 << (i % 8);
    }
}

fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    let mask: Vec<bool> = (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
    if n % 8 != 0 && bytes[n / 8] >> (n % 8) != 0 {
        return Err(FedError::Protocol("nonzero padding bits in mask".into()));
    }
    Ok(mask)
}

fn push_floats(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a message body.
struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        let slice = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| FedError::Protocol(format!("body truncated: need {end} bytes, have {}", self.bytes.len())))?;
        self.at = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(FedError::Protocol(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn count(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| FedError::Encode(format!("{what} count {n} exceeds u32")))
}

pub fn encode_dense(round: u32, client_id: u32, strategy: Strategy, params: &[f32]) -> Result<WireMessage> {
    let mut body = Vec::with_capacity(4 + 4 * params.len());
    body.extend_from_slice(&count(params.len(), "parameter")?.to_le_bytes());
    push_floats(params, &mut body);
    Ok(WireMessage {
        header: Header {
            round,
            client_id,
            strategy,
            kind: PayloadKind::Dense,
        },
        body,
    })
}

pub fn decode_dense(msg: &WireMessage) -> Result<Vec<f32>> {
    msg.expect_kind(PayloadKind::Dense)?;
    let mut r = Reader { bytes: &msg.body, at: 0 };
    let n = r.u32()? as usize;
    let values = r.floats(n)?;
    r.finish()?;
    Ok(values)
}

/// Group bitmask, the floats of set groups (then always-sent floats), and
/// optional per-group thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload {
    pub mask: Vec<bool>,
    pub weights: Vec<f32>,
    pub thresholds: Option<Vec<f32>>,
}

/// Encoded size of a sparse message.
pub fn sparse_message_len(groups: usize, floats: usize, with_thresholds: bool) -> usize {
    HEADER_LEN + 4 + groups.div_ceil(8) + 4 * floats + 1 + if with_thresholds { 4 * groups } else { 0 }
}

pub fn encode_sparse(
    round: u32,
    client_id: u32,
    strategy: Strategy,
    layout: &MaskedLayout,
    payload: &SparsePayload,
) -> Result<WireMessage> {
    let g = layout.slot_sizes.len();
    if payload.mask.len() != g {
        return Err(FedError::Encode(format!("bitmask has {} entries for {g} groups", payload.mask.len())));
    }
    let expected = layout.floats_for(&payload.mask);
    if payload.weights.len() != expected {
        return Err(FedError::Encode(format!(
            "{} surviving weights supplied, mask implies {expected}",
            payload.weights.len()
        )));
    }
    if let Some(v) = &payload.thresholds {
        if v.len() != g {
            return Err(FedError::Encode(format!("{} thresholds for {g} groups", v.len())));
        }
    }
    let mut body = Vec::with_capacity(sparse_message_len(g, expected, payload.thresholds.is_some()) - HEADER_LEN);
    body.extend_from_slice(&count(g, "group")?.to_le_bytes());
    pack_bits(&payload.mask, &mut body);
    push_floats(&payload.weights, &mut body);
    match &payload.thresholds {
        None => body.push(0),
        Some(v) => {
            body.push(1);
            push_floats(v, &mut body);
        }
    }
    Ok(WireMessage {
        header: Header {
            round,
            client_id,
            strategy,
            kind: PayloadKind::Sparse,
        },
        body,
    })
}

pub fn decode_sparse(msg: &WireMessage, layout: &MaskedLayout) -> Result<SparsePayload> {
    msg.expect_kind(PayloadKind::Sparse)?;
    let mut r = Reader { bytes: &msg.body, at: 0 };
    let g = r.u32()? as usize;
    if g != layout.slot_sizes.len() {
        return Err(FedError::Protocol(format!(
            "bitmask covers {g} groups, model has {}",
            layout.slot_sizes.len()
        )));
    }
    let mask = unpack_bits(r.take(g.div_ceil(8))?, g)?;
    let weights = r.floats(layout.floats_for(&mask))?;
    let thresholds = match r.take(1)?[0] {
        0 => None,
        1 => Some(r.floats(g)?),
        f => return Err(FedError::Protocol(format!("bad threshold flag {f}"))),
    };
    r.finish()?;
    Ok(SparsePayload {
        mask,
        weights,
        thresholds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmodelPayload {
    pub unit_mask: Vec<bool>,
    pub params: Vec<f32>,
}

pub fn encode_submodel(
    round: u32,
    client_id: u32,
    strategy: Strategy,
    layout: &MaskedLayout,
    payload: &SubmodelPayload,
) -> Result<WireMessage> {
    let u = layout.slot_sizes.len();
    if payload.unit_mask.len() != u {
        return Err(FedError::Encode(format!("unit mask has {} entries for {u} units", payload.unit_mask.len())));
    }
    if !payload.unit_mask.iter().any(|&m| m) {
        return Err(FedError::Encode("submodel retains no units".into()));
    }
    let expected = layout.floats_for(&payload.unit_mask);
    if payload.params.len() != expected {
        return Err(FedError::Encode(format!(
            "{} sub-parameters supplied, mask implies {expected}",
            payload.params.len()
        )));
    }
    let mut body = Vec::with_capacity(4 + u.div_ceil(8) + 4 * expected);
    body.extend_from_slice(&count(u, "unit")?.to_le_bytes());
    pack_bits(&payload.unit_mask, &mut body);
    push_floats(&payload.params, &mut body);
    Ok(WireMessage {
        header: Header {
            round,
            client_id,
            strategy,
            kind: PayloadKind::Submodel,
        },
        body,
    })
}

pub fn decode_submodel(msg: &WireMessage, layout: &MaskedLayout) -> Result<SubmodelPayload> {
    msg.expect_kind(PayloadKind::Submodel)?;
    let mut r = Reader { bytes: &msg.body, at: 0 };
    let u = r.u32()? as usize;
    if u != layout.slot_sizes.len() {
        return Err(FedError::Protocol(format!(
            "unit mask covers {u} units, model has {}",
            layout.slot_sizes.len()
        )));
    }
    let unit_mask = unpack_bits(r.take(u.div_ceil(8))?, u)?;
    let params = r.floats(layout.floats_for(&unit_mask))?;
    r.finish()?;
    Ok(SubmodelPayload { unit_mask, params })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundCost {
    pub round: u32,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub messages: u64,
}

/// Exact byte counts of every message that crossed the simulated network.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    rounds: Vec<RoundCost>,
    per_client: BTreeMap<u32, (u64, u64)>,
    cum_up: u64,
    cum_down: u64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn entry(&mut self, round: u32) -> &mut RoundCost {
        if self.rounds.last().is_none_or(|r| r.round != round) {
            self.rounds.push(RoundCost {
                round,
                ..Default::default()
            });
        }
        self.rounds.last_mut().expect("just pushed")
    }

    /// Server → client.
    pub fn record_dispatch(&mut self, msg: &WireMessage) {
        let n = msg.encoded_len() as u64;
        let e = self.entry(msg.header.round);
        e.bytes_down += n;
        e.messages += 1;
        self.cum_down += n;
        self.per_client.entry(msg.header.client_id).or_default().1 += n;
    }

    /// Client → server.
    pub fn record_upload(&mut self, msg: &WireMessage) {
        let n = msg.encoded_len() as u64;
        let e = self.entry(msg.header.round);
        e.bytes_up += n;
        e.messages += 1;
        self.cum_up += n;
        self.per_client.entry(msg.header.client_id).or_default().0 += n;
    }

    pub fn rounds(&self) -> &[RoundCost] {
        &self.rounds
    }

    pub fn bytes_up(&self) -> u64 {
        self.cum_up
    }

    pub fn bytes_down(&self) -> u64 {
        self.cum_down
    }

    /// `(up, down)` per client id.
    pub fn per_client(&self) -> &BTreeMap<u32, (u64, u64)> {
        &self.per_client
    }

    /// Cumulative `(up, down)` through the given round.
    pub fn cumulative_through(&self, round: u32) -> (u64, u64) {
        self.rounds
            .iter()
            .filter(|r| r.round <= round)
            .fold((0, 0), |(u, d), r| (u + r.bytes_up, d + r.bytes_down))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::Strategy;
    use proptest::prelude::*;

    fn layout8() -> MaskedLayout {
        MaskedLayout {
            slot_sizes: vec![4; 8],
            always: 0,
        }
    }

    #[test]
    fn sparse_size_example() {
        let mask = vec![true, false, true, false, false, true, false, false];
        let payload = SparsePayload {
            mask,
            weights: vec![0.5; 12],
            thresholds: None,
        };
        let msg = encode_sparse(1, 2, Strategy::Fedsparse, &layout8(), &payload).unwrap();
        assert_eq!(msg.encoded_len(), 10 + 4 + 1 + 48 + 1);
        assert_eq!(msg.encoded_len(), 64);
        assert_eq!(msg.encoded_len(), sparse_message_len(8, 12, false));
        let with_v = SparsePayload {
            thresholds: Some(vec![0.1; 8]),
            ..payload
        };
        let msg = encode_sparse(1, 2, Strategy::Fedsparse, &layout8(), &with_v).unwrap();
        assert_eq!(msg.encoded_len(), 64 + 32);
    }

    #[test]
    fn all_closed_sparse_message() {
        let payload = SparsePayload {
            mask: vec![false; 8],
            weights: vec![],
            thresholds: None,
        };
        let msg = encode_sparse(0, 0, Strategy::Fedsparse, &layout8(), &payload).unwrap();
        assert_eq!(msg.encoded_len(), HEADER_LEN + 4 + 1 + 1);
        let back = decode_sparse(&WireMessage::from_bytes(&msg.to_bytes()).unwrap(), &layout8()).unwrap();
        assert_eq!(back, payload);
    }

    #[test]
    fn sparse_count_mismatch_is_rejected() {
        let payload = SparsePayload {
            mask: vec![true; 8],
            weights: vec![0.0; 31],
            thresholds: None,
        };
        assert!(matches!(
            encode_sparse(0, 0, Strategy::Fedsparse, &layout8(), &payload),
            Err(FedError::Encode(_))
        ));
    }

    #[test]
    fn dense_size_and_round_trip() {
        let params: Vec<f32> = (0..100).map(|i| i as f32 * 0.25 - 3.0).collect();
        let msg = encode_dense(7, 3, Strategy::Fedavg, &params).unwrap();
        assert_eq!(msg.encoded_len(), 414);
        let bytes = msg.to_bytes();
        assert_eq!(bytes.len(), 414);
        assert_eq!(&bytes[0..4], &7u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(bytes[9], PayloadKind::Dense as u8);
        let back = WireMessage::from_bytes(&bytes).unwrap();
        assert_eq!(back, msg);
        assert_eq!(decode_dense(&back).unwrap(), params);
    }

    #[test]
    fn empty_submodel_is_rejected() {
        let layout = MaskedLayout {
            slot_sizes: vec![3; 4],
            always: 2,
        };
        let payload = SubmodelPayload {
            unit_mask: vec![false; 4],
            params: vec![0.0; 2],
        };
        assert!(encode_submodel(0, 0, Strategy::Feddrop, &layout, &payload).is_err());
    }

    #[test]
    fn submodel_layout() {
        let layout = MaskedLayout {
            slot_sizes: vec![3; 4],
            always: 2,
        };
        let payload = SubmodelPayload {
            unit_mask: vec![true, false, false, true],
            params: vec![1.0; 8],
        };
        let msg = encode_submodel(0, 0, Strategy::Feddrop, &layout, &payload).unwrap();
        assert_eq!(msg.encoded_len(), HEADER_LEN + 4 + 1 + 32);
        assert_eq!(decode_submodel(&msg, &layout).unwrap(), payload);
    }

    #[test]
    fn decoder_rejects_bad_frames() {
        assert!(WireMessage::from_bytes(&[0; 5]).is_err());
        let msg = encode_dense(0, 0, Strategy::Fedavg, &[1.0, 2.0]).unwrap();
        let mut bytes = msg.to_bytes();
        bytes.push(0);
        assert!(decode_dense(&WireMessage::from_bytes(&bytes).unwrap()).is_err());
        assert!(decode_sparse(&msg, &layout8()).is_err());
        let mut bytes = msg.to_bytes();
        bytes[9] = 9;
        assert!(WireMessage::from_bytes(&bytes).is_err());
    }

    #[test]
    fn ledger_counts_directions() {
        let mut ledger = CostLedger::new();
        let params = vec![0.0f32; 10];
        for c in 0..10 {
            let m = encode_dense(1, c, Strategy::Fedavg, &params).unwrap();
            ledger.record_dispatch(&m);
            ledger.record_upload(&m);
        }
        let each = (HEADER_LEN + 4 + 40) as u64;
        assert_eq!(ledger.bytes_down(), 10 * each);
        assert_eq!(ledger.bytes_up(), 10 * each);
        assert_eq!(ledger.rounds().len(), 1);
        assert_eq!(ledger.per_client()[&3], (each, each));
        assert_eq!(ledger.cumulative_through(0), (0, 0));
        assert_eq!(ledger.cumulative_through(1), (10 * each, 10 * each));
    }

    proptest! {
        #[test]
        fn sparse_round_trip(mask in prop::collection::vec(any::<bool>(), 1..40),
                             with_v in any::<bool>(),
                             seed in any::<u32>()) {
            let layout = MaskedLayout { slot_sizes: (0..mask.len()).map(|i| 1 + i % 3).collect(), always: 2 };
            let n = layout.floats_for(&mask);
            let weights: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let thresholds = with_v.then(|| (0..mask.len()).map(|i| i as f32 * 0.1).collect());
            let payload = SparsePayload { mask: mask.clone(), weights, thresholds };
            let msg = encode_sparse(3, 4, Strategy::Fedsparse, &layout, &payload).unwrap();
            prop_assert_eq!(msg.encoded_len(), sparse_message_len(mask.len(), n, with_v));
            let back = decode_sparse(&WireMessage::from_bytes(&msg.to_bytes()).unwrap(), &layout).unwrap();
            prop_assert_eq!(back, payload);
        }
    }
}
