//! Binary message format and communication-volume accounting.
//!
//! Layout, all integers `u32` little-endian and all reals IEEE-754 `f32`
//! little-endian:
//!
//! ```text
//! magic "SCWM" | version | sender | receiver | round | H | W | D | n
//! request map: H*W f32, row-major
//! n records:   flat cell index (u32) | D f32 feature values
//! ```
//!
//! Record indices are strictly increasing and below `H * W`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, GridShape, ScalarMap, SelectionMask};

pub const MAGIC: [u8; 4] = *b"SCWM";
pub const VERSION: u32 = 1;
/// Bytes before the request map: magic, version and seven header words.
pub const PREAMBLE_BYTES: usize = 4 + 4 + 7 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MessageHeader {
    pub sender: u32,
    pub receiver: u32,
    pub round: u32,
}

/// One directed message `(R, Z)` in wire precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub header: MessageHeader,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    /// `H * W` request values.
    pub request: Vec<f32>,
    /// Selected flat cell indices, strictly increasing.
    pub indices: Vec<u32>,
    /// `n * D` feature values, record-major.
    pub values: Vec<f32>,
}

impl Message {
    pub fn payload_cells(&self) -> usize {
        self.indices.len()
    }

    fn check(&self) -> std::result::Result<(), String> {
        let cells = self.height as usize * self.width as usize;
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err("zero grid dimension".into());
        }
        if self.request.len() != cells {
            return Err(format!("request map has {} values, expected {cells}", self.request.len()));
        }
        if self.values.len() != self.indices.len() * self.channels as usize {
            return Err(format!(
                "{} feature values for {} records of {} channels",
                self.values.len(),
                self.indices.len(),
                self.channels
            ));
        }
        for (i, &idx) in self.indices.iter().enumerate() {
            if idx as usize >= cells {
                return Err(format!("record {i}: index {idx} >= {cells}"));
            }
            if i > 0 && idx <= self.indices[i - 1] {
                return Err(format!("record {i}: index {idx} not strictly increasing"));
            }
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        PREAMBLE_BYTES + 4 * self.request.len() + self.indices.len() * (4 + 4 * self.channels as usize)
    }

    pub fn volume(&self) -> VolumeReport {
        VolumeReport::new(self.payload_cells(), self.channels as usize)
    }

    /// Request map widened back to `f64`, clamped into `[0, 1]`.
    pub fn request_map(&self) -> Result<ScalarMap> {
        ScalarMap::from_clamped(
            self.height as usize,
            self.width as usize,
            self.request.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Cells carried by the payload.
    pub fn mask(&self) -> Result<SelectionMask> {
        let idx: Vec<usize> = self.indices.iter().map(|&i| i as usize).collect();
        SelectionMask::from_indices(self.height as usize, self.width as usize, &idx)
    }

    /// Dense `f64` feature map with zeros at unsent cells.
    pub fn dense_features(&self, cell_size: f64) -> Result<FeatureMap> {
        let shape = GridShape::new(
            self.height as usize,
            self.width as usize,
            self.channels as usize,
            cell_size,
        )?;
        let d = shape.channels;
        let mut values = vec![0.0; shape.cells() * d];
        for (rec, &idx) in self.indices.iter().enumerate() {
            let dst = &mut values[idx as usize * d..(idx as usize + 1) * d];
            for (slot, &v) in dst.iter_mut().zip(&self.values[rec * d..(rec + 1) * d]) {
                *slot = v as f64;
            }
        }
        FeatureMap::from_values(shape, values)
    }
}

pub fn encode_message(m: &Message) -> Result<Vec<u8>> {
    m.check().map_err(Error::Encode)?;
    let mut out = Vec::with_capacity(m.encoded_len());
    out.extend_from_slice(&MAGIC);
    for word in [
        VERSION,
        m.header.sender,
        m.header.receiver,
        m.header.round,
        m.height,
        m.width,
        m.channels,
        m.indices.len() as u32,
    ] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for v in &m.request {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let d = m.channels as usize;
    for (rec, idx) in m.indices.iter().enumerate() {
        out.extend_from_slice(&idx.to_le_bytes());
        for v in &m.values[rec * d..(rec + 1) * d] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Decode {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take4(&mut self, what: &str) -> Result<[u8; 4]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.fail(format!("truncated while reading {what}")))?;
        self.pos += 4;
        Ok(chunk.try_into().expect("slice of length 4"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.take4(what).map(u32::from_le_bytes)
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        self.take4(what).map(f32::from_le_bytes)
    }
}

pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take4("magic")? != MAGIC {
        rd.pos = 0;
        return Err(rd.fail("bad magic"));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        rd.pos -= 4;
        return Err(rd.fail(format!("unsupported version {version}")));
    }
    let header = MessageHeader {
        sender: rd.u32("sender")?,
        receiver: rd.u32("receiver")?,
        round: rd.u32("round")?,
    };
    let height = rd.u32("height")?;
    let width = rd.u32("width")?;
    let channels = rd.u32("channels")?;
    let n = rd.u32("record count")? as usize;
    if height == 0 || width == 0 || channels == 0 {
        return Err(rd.fail("zero grid dimension"));
    }
    let cells = height as usize * width as usize;
    let d = channels as usize;
    let needed = cells
        .checked_mul(4)
        .and_then(|r| n.checked_mul(4 + 4 * d).and_then(|p| p.checked_add(r)));
    match needed {
        Some(len) if bytes.len() - rd.pos >= len => {}
        _ => return Err(rd.fail("truncated: stream shorter than header implies")),
    }

    let mut request = Vec::with_capacity(cells);
    for _ in 0..cells {
        request.push(rd.f32("request map")?);
    }
    let mut indices = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * d);
    for rec in 0..n {
        let idx = rd.u32("record index")?;
        if idx as usize >= cells {
            rd.pos -= 4;
            return Err(rd.fail(format!("record {rec}: index {idx} >= {cells}")));
        }
        if let Some(&prev) = indices.last() {
            if idx <= prev {
                rd.pos -= 4;
                return Err(rd.fail(format!("record {rec}: index {idx} not above {prev}")));
            }
        }
        indices.push(idx);
        for _ in 0..d {
            values.push(rd.f32("feature value")?);
        }
    }
    if rd.pos != bytes.len() {
        return Err(rd.fail(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok(Message {
        header,
        height,
        width,
        channels,
        request,
        indices,
        values,
    })
}

/// `log2(n * D * 32 / 8)`, defined as 0 for an empty payload.
pub fn comm_volume(cells: usize, channels: usize) -> f64 {
    if cells == 0 {
        0.0
    } else {
        ((cells * channels * 4) as f64).log2()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VolumeReport {
    pub payload_cells: usize,
    pub channels: usize,
    pub volume_log2_bytes: f64,
    /// Feature bytes plus index bytes of the sparse payload, `n * (4 + 4D)`.
    pub raw_bytes: usize,
}

impl VolumeReport {
    pub fn new(payload_cells: usize, channels: usize) -> Self {
        VolumeReport {
            payload_cells,
            channels,
            volume_log2_bytes: comm_volume(payload_cells, channels),
            raw_bytes: payload_cells * (4 + 4 * channels),
        }
    }

    /// Bytes counted against the budget: `n * D * 4`.
    pub fn feature_bytes(&self) -> usize {
        self.payload_cells * self.channels * 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Lcg64;
    use proptest::prelude::*;

    fn message(n_idx: &[u32], d: u32) -> Message {
        Message {
            header: MessageHeader {
                sender: 2,
                receiver: 5,
                round: 1,
            },
            height: 4,
            width: 4,
            channels: d,
            request: (0..16).map(|i| i as f32 / 16.0).collect(),
            indices: n_idx.to_vec(),
            values: (0..n_idx.len() * d as usize).map(|i| i as f32 - 3.5).collect(),
        }
    }

    #[test]
    fn empty_payload_is_header_plus_request() {
        let m = message(&[], 3);
        let bytes = encode_message(&m).unwrap();
        assert_eq!(bytes.len(), PREAMBLE_BYTES + 16 * 4);
        assert_eq!(&bytes[..4], b"SCWM");
        assert_eq!(decode_message(&bytes).unwrap(), m);
    }

    #[test]
    fn payload_section_size() {
        let m = message(&[1, 7, 9], 2);
        let bytes = encode_message(&m).unwrap();
        assert_eq!(bytes.len() - PREAMBLE_BYTES - 16 * 4, 36);
        assert_eq!(m.encoded_len(), bytes.len());
    }

    #[test]
    fn encode_rejects_bad_indices() {
        assert!(matches!(encode_message(&message(&[3, 3], 1)), Err(Error::Encode(_))));
        assert!(matches!(encode_message(&message(&[4, 2], 1)), Err(Error::Encode(_))));
        assert!(matches!(encode_message(&message(&[16], 1)), Err(Error::Encode(_))));
        let mut m = message(&[1], 1);
        m.values.push(0.0);
        assert!(matches!(encode_message(&m), Err(Error::Encode(_))));
    }

    #[test]
    fn decode_reports_truncation() {
        let bytes = encode_message(&message(&[1, 2], 2)).unwrap();
        for cut in [0, 3, 10, PREAMBLE_BYTES, bytes.len() - 1] {
            assert!(
                matches!(decode_message(&bytes[..cut]), Err(Error::Decode { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn decode_reports_bad_records_with_position() {
        let mut bytes = encode_message(&message(&[1, 2], 2)).unwrap();
        let second_record = PREAMBLE_BYTES + 64 + 12;
        bytes[second_record..second_record + 4].copy_from_slice(&1u32.to_le_bytes());
        match decode_message(&bytes) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, second_record),
            other => panic!("expected decode error, got {other:?}"),
        }
        bytes[second_record..second_record + 4].copy_from_slice(&16u32.to_le_bytes());
        assert!(matches!(decode_message(&bytes), Err(Error::Decode { offset, .. }) if offset == second_record));
    }

    #[test]
    fn decode_rejects_magic_version_trailing() {
        let bytes = encode_message(&message(&[1], 1)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_message(&bad), Err(Error::Decode { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_message(&bad), Err(Error::Decode { offset: 4, .. })));
        let mut bad = bytes;
        bad.push(0);
        assert!(decode_message(&bad).is_err());
    }

    #[test]
    fn eq_comm_values() {
        assert!((comm_volume(256, 64) - 16.0).abs() < 1e-9);
        assert!((comm_volume(1, 2) - 3.0).abs() < 1e-9);
        assert_eq!(comm_volume(0, 64), 0.0);
        let r = VolumeReport::new(3, 2);
        assert_eq!(r.raw_bytes, 36);
        assert_eq!(r.feature_bytes(), 24);
        assert!((r.volume_log2_bytes - 24f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn comm_volume_strictly_increasing() {
        for d in [1, 3, 8, 64] {
            for n in 1..500 {
                assert!(comm_volume(n + 1, d) > comm_volume(n, d));
            }
        }
    }

    #[test]
    fn random_round_trips() {
        let mut g = Lcg64::new(8);
        for _ in 0..200 {
            let h = g.range_inclusive(1, 6) as u32;
            let w = g.range_inclusive(1, 6) as u32;
            let d = g.range_inclusive(1, 5) as u32;
            let cells = (h * w) as usize;
            let indices: Vec<u32> = (0..cells as u32).filter(|_| g.next_f64() < 0.3).collect();
            let m = Message {
                header: MessageHeader {
                    sender: g.next_u64() as u32,
                    receiver: g.next_u64() as u32,
                    round: g.range_inclusive(0, 4) as u32,
                },
                height: h,
                width: w,
                channels: d,
                request: (0..cells).map(|_| f32::from_bits(g.next_u64() as u32)).collect(),
                values: (0..indices.len() * d as usize)
                    .map(|_| f32::from_bits(g.next_u64() as u32))
                    .collect(),
                indices,
            };
            let back = decode_message(&encode_message(&m).unwrap()).unwrap();
            // compare bit patterns: NaN payloads must survive too
            assert_eq!(back.header, m.header);
            assert_eq!(back.indices, m.indices);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back.request), bits(&m.request));
            assert_eq!(bits(&back.values), bits(&m.values));
        }
    }

    proptest! {
        #[test]
        fn decode_then_encode_is_identity(seed in any::<u64>()) {
            let mut g = Lcg64::new(seed);
            let indices: Vec<u32> = (0..16u32).filter(|_| g.next_f64() < 0.5).collect();
            let mut m = message(&indices, 3);
            m.values = (0..indices.len() * 3).map(|_| g.uniform(-10.0, 10.0) as f32).collect();
            let bytes = encode_message(&m).unwrap();
            prop_assert_eq!(encode_message(&decode_message(&bytes).unwrap()).unwrap(), bytes);
        }
    }
}
