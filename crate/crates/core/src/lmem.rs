//! LMEM adapter container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `LMEM`                              |
//! | 4..8         | format version, `u32`                     |
//! | 8..16        | header length `H`, `u64`                  |
//! | 16..16+H     | UTF-8 JSON header                         |
//! | 16+H..       | payload of `f32` values, row-major        |
//!
//! The header is `{name, metadata, targets: [{id, d_out, d_in, rank, alpha,
//! a_offset, b_offset}]}`. Offsets are byte offsets from the payload start;
//! each target stores `A` then `B`, targets in header order, with no gaps.
//! Dense merge results use an extension record `{id, kind: "dense", d_out,
//! d_in, offset}` holding the `(d_out, d_in)` matrix directly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, LowRankPair, MergedDelta, MergedTarget};
use crate::error::{Error, FormatError, Result};
use crate::matcore::Matrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"LMEM";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    #[default]
    Lowrank,
    Dense,
}

impl TargetKind {
    fn is_lowrank(&self) -> bool {
        *self == TargetKind::Lowrank
    }
}

/// One entry of the JSON header's `targets` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "TargetKind::is_lowrank")]
    pub kind: TargetKind,
    pub d_out: usize,
    pub d_in: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub name: String,
    pub metadata: BTreeMap<String, String>,
    pub targets: Vec<TargetRecord>,
}

/// Decoded container: lowrank targets stay factorized, dense ones dense.
#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub name: String,
    pub metadata: BTreeMap<String, String>,
    pub targets: MergedDelta<T>,
}

impl<T: Scalar> Container<T> {
    /// Views the container as an adapter; dense targets become exact thin
    /// factorizations.
    pub fn into_adapter(self) -> Result<Adapter<T>> {
        let mut adapter = self.targets.into_adapter(self.name)?;
        adapter.metadata = self.metadata;
        Ok(adapter)
    }
}

fn push_matrix<T: Scalar>(payload: &mut Vec<u8>, m: &Matrix<T>) {
    for &v in m.data() {
        payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

fn assemble(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Serializes an adapter. Factors are quantized to `f32`.
pub fn encode<T: Scalar>(adapter: &Adapter<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut targets = Vec::new();
    for (id, pair) in adapter.targets() {
        let a_offset = payload.len() as u64;
        push_matrix(&mut payload, pair.a());
        let b_offset = payload.len() as u64;
        push_matrix(&mut payload, pair.b());
        targets.push(TargetRecord {
            id: id.clone(),
            kind: TargetKind::Lowrank,
            d_out: pair.d_out(),
            d_in: pair.d_in(),
            rank: Some(pair.rank()),
            alpha: Some(pair.alpha().as_f64()),
            a_offset: Some(a_offset),
            b_offset: Some(b_offset),
            offset: None,
        });
    }
    let header = Header {
        name: adapter.name.clone(),
        metadata: adapter.metadata.clone(),
        targets,
    };
    assemble(&header, &payload)
}

/// Serializes a merge result, writing dense targets as extension records.
pub fn encode_merged<T: Scalar>(
    name: &str,
    metadata: &BTreeMap<String, String>,
    merged: &MergedDelta<T>,
) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut targets = Vec::new();
    for (id, target) in &merged.targets {
        match target {
            MergedTarget::Factorized(pair) => {
                let a_offset = payload.len() as u64;
                push_matrix(&mut payload, pair.a());
                let b_offset = payload.len() as u64;
                push_matrix(&mut payload, pair.b());
                targets.push(TargetRecord {
                    id: id.clone(),
                    kind: TargetKind::Lowrank,
                    d_out: pair.d_out(),
                    d_in: pair.d_in(),
                    rank: Some(pair.rank()),
                    alpha: Some(pair.alpha().as_f64()),
                    a_offset: Some(a_offset),
                    b_offset: Some(b_offset),
                    offset: None,
                });
            }
            MergedTarget::Dense(m) => {
                let offset = payload.len() as u64;
                push_matrix(&mut payload, m);
                targets.push(TargetRecord {
                    id: id.clone(),
                    kind: TargetKind::Dense,
                    d_out: m.rows(),
                    d_in: m.cols(),
                    rank: None,
                    alpha: None,
                    a_offset: None,
                    b_offset: None,
                    offset: Some(offset),
                });
            }
        }
    }
    let header = Header {
        name: name.to_string(),
        metadata: metadata.clone(),
        targets,
    };
    assemble(&header, &payload)
}

fn truncated(what: impl Into<String>, needed: u64, available: u64) -> Error {
    FormatError::Truncated {
        what: what.into(),
        needed,
        available,
    }
    .into()
}

fn mismatch(msg: impl Into<String>) -> Error {
    FormatError::LengthMismatch(msg.into()).into()
}

fn malformed(msg: impl Into<String>) -> Error {
    FormatError::MalformedHeader(msg.into()).into()
}

/// Splits raw bytes into the parsed header and the payload slice.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let available = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(truncated("magic", 4, available));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    if bytes.len() < 8 {
        return Err(truncated("format version", 8, available));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    if bytes.len() < PREAMBLE {
        return Err(truncated("header length", PREAMBLE as u64, available));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .ok_or_else(|| truncated("header", u64::MAX, available))?;
    if header_end > available {
        return Err(truncated("header", header_end, available));
    }
    let header_end = header_end as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| malformed(e.to_string()))?;
    Ok((header, &bytes[header_end..]))
}

struct PayloadReader<'a> {
    payload: &'a [u8],
    cursor: u64,
}

impl PayloadReader<'_> {
    fn matrix<T: Scalar>(&mut self, what: String, offset: Option<u64>, rows: usize, cols: usize) -> Result<Matrix<T>> {
        let offset = offset.ok_or_else(|| malformed(format!("{what}: missing offset")))?;
        let len = (rows as u64)
            .checked_mul(cols as u64)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| malformed(format!("{what}: size overflow")))?;
        let end = offset
            .checked_add(len)
            .ok_or_else(|| truncated(what.clone(), u64::MAX, self.payload.len() as u64))?;
        if end > self.payload.len() as u64 {
            return Err(truncated(what, end, self.payload.len() as u64));
        }
        if offset != self.cursor {
            return Err(mismatch(format!(
                "{what}: offset {offset} but previous tensor ended at {}",
                self.cursor
            )));
        }
        self.cursor = end;
        let data = self.payload[offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
            .collect();
        Matrix::new(rows, cols, data)
    }
}

/// Parses a whole container.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Container<T>> {
    let (header, payload) = decode_header(bytes)?;
    let mut reader = PayloadReader { payload, cursor: 0 };
    let mut targets = MergedDelta::default();
    for rec in &header.targets {
        let target = match rec.kind {
            TargetKind::Lowrank => {
                let rank = rec
                    .rank
                    .ok_or_else(|| malformed(format!("target {}: missing rank", rec.id)))?;
                let alpha = rec
                    .alpha
                    .ok_or_else(|| malformed(format!("target {}: missing alpha", rec.id)))?;
                let a = reader.matrix(format!("target {} A", rec.id), rec.a_offset, rank, rec.d_in)?;
                let b = reader.matrix(format!("target {} B", rec.id), rec.b_offset, rec.d_out, rank)?;
                MergedTarget::Factorized(
                    LowRankPair::new(a, b, T::of(alpha)).map_err(|e| malformed(e.to_string()))?,
                )
            }
            TargetKind::Dense => MergedTarget::Dense(reader.matrix(
                format!("target {} dense", rec.id),
                rec.offset,
                rec.d_out,
                rec.d_in,
            )?),
        };
        if targets.targets.insert(rec.id.clone(), target).is_some() {
            return Err(malformed(format!("duplicate target id {:?}", rec.id)));
        }
    }
    if reader.cursor != payload.len() as u64 {
        return Err(mismatch(format!(
            "header describes {} payload bytes, file carries {}",
            reader.cursor,
            payload.len()
        )));
    }
    Ok(Container {
        name: header.name,
        metadata: header.metadata,
        targets,
    })
}

pub fn save<T: Scalar>(adapter: &Adapter<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(adapter)?)?;
    Ok(())
}

pub fn save_merged<T: Scalar>(
    name: &str,
    metadata: &BTreeMap<String, String>,
    merged: &MergedDelta<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, encode_merged(name, metadata, merged)?)?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })
}

/// Loads a container as an adapter (dense targets thin-factorized).
pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Adapter<T>> {
    decode(&read(path.as_ref())?)?.into_adapter()
}

pub fn load_container<T: Scalar>(path: impl AsRef<Path>) -> Result<Container<T>> {
    decode(&read(path.as_ref())?)
}

/// Header only, for inspection.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    Ok(decode_header(&read(path.as_ref())?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::Rng;
    use proptest::prelude::*;

    fn sample(seed: u64) -> Adapter<f64> {
        let mut rng = Rng::new(seed);
        let mut adapter = Adapter::new("sample").with_meta("seed", seed.to_string());
        for (id, d_out, d_in, rank) in [("q", 4, 6, 2), ("v", 3, 5, 1)] {
            let pair = LowRankPair::new(
                Matrix::fill_gaussian(&mut rng, rank, d_in, 1.0).unwrap(),
                Matrix::fill_gaussian(&mut rng, d_out, rank, 1.0).unwrap(),
                2.0,
            )
            .unwrap();
            adapter.insert_target(id, pair).unwrap();
        }
        adapter
    }

    fn format_err(bytes: &[u8]) -> FormatError {
        match decode::<f64>(bytes) {
            Err(Error::Format(e)) => e,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let pair = LowRankPair::new(
            Matrix::new(1, 2, vec![1.0, -2.0]).unwrap(),
            Matrix::new(1, 1, vec![0.5]).unwrap(),
            1.0,
        )
        .unwrap();
        let adapter = Adapter::new("t").with_target("w", pair).unwrap();
        let bytes = encode(&adapter).unwrap();
        assert_eq!(&bytes[0..4], b"LMEM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[16..16 + h]).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "name": "t",
                "metadata": {},
                "targets": [{"id": "w", "d_out": 1, "d_in": 2, "rank": 1, "alpha": 1.0, "a_offset": 0, "b_offset": 8}]
            })
        );
        let payload = &bytes[16 + h..];
        let mut expected = Vec::new();
        for v in [1.0f32, -2.0, 0.5] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(payload, expected.as_slice());
    }

    #[test]
    fn round_trip_equals_quantized() {
        let adapter = sample(3);
        let back: Adapter<f64> = decode(&encode(&adapter).unwrap()).unwrap().into_adapter().unwrap();
        assert_eq!(back, adapter.quantized());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample(1)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(format_err(&bytes), FormatError::BadMagic { .. }));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&sample(1)).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(format_err(&bytes), FormatError::UnsupportedVersion { found: 7, .. }));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode(&sample(1)).unwrap();
        assert!(matches!(format_err(&bytes[..bytes.len() - 4]), FormatError::Truncated { .. }));
        assert!(matches!(format_err(&bytes[..10]), FormatError::Truncated { .. }));
        assert!(matches!(format_err(&bytes[..2]), FormatError::Truncated { .. }));
    }

    #[test]
    fn offset_past_end_is_truncation() {
        let adapter = sample(1);
        let mut header: Header = decode_header(&encode(&adapter).unwrap()).unwrap().0;
        header.targets[1].b_offset = Some(1 << 20);
        let payload_len: usize = adapter.count_params() * 4;
        let bytes = assemble(&header, &vec![0u8; payload_len]).unwrap();
        assert!(matches!(format_err(&bytes), FormatError::Truncated { .. }));
    }

    #[test]
    fn trailing_bytes_are_length_mismatch() {
        let mut bytes = encode(&sample(1)).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(format_err(&bytes), FormatError::LengthMismatch(_)));
    }

    #[test]
    fn overlapping_offsets_are_length_mismatch() {
        let adapter = sample(1);
        let mut header: Header = decode_header(&encode(&adapter).unwrap()).unwrap().0;
        header.targets[0].b_offset = Some(0);
        let bytes = assemble(&header, &vec![0u8; adapter.count_params() * 4]).unwrap();
        assert!(matches!(format_err(&bytes), FormatError::LengthMismatch(_)));
    }

    #[test]
    fn garbage_header_is_malformed() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LMEM");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(b"{{{");
        assert!(matches!(format_err(&bytes), FormatError::MalformedHeader(_)));
    }

    #[test]
    fn dense_extension_round_trip() {
        let mut rng = Rng::new(5);
        let dense = Matrix::<f64>::fill_gaussian(&mut rng, 3, 4, 1.0).unwrap();
        let mut merged = MergedDelta::default();
        merged.targets.insert("w".into(), MergedTarget::Dense(dense.clone()));
        let bytes = encode_merged("m", &BTreeMap::new(), &merged).unwrap();
        let header = decode_header(&bytes).unwrap().0;
        assert_eq!(header.targets[0].kind, TargetKind::Dense);
        let container: Container<f64> = decode(&bytes).unwrap();
        let back = container.targets.densify("w").unwrap();
        let quantized = Matrix::from_fn(3, 4, |i, j| f64::from(dense.get(i, j) as f32));
        assert_eq!(back, quantized);
        let adapter = container.into_adapter().unwrap();
        assert_eq!(adapter.target("w").unwrap().delta(), quantized);
    }

    #[test]
    fn missing_file() {
        let err = load::<f64>("/nonexistent/x.lmem").unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact_on_quantized(seed in any::<u64>(), d_out in 1usize..6, d_in in 1usize..6, rank in 1usize..4) {
            let mut rng = Rng::new(seed);
            let pair = LowRankPair::new(
                Matrix::<f64>::fill_gaussian(&mut rng, rank, d_in, 3.0).unwrap(),
                Matrix::fill_gaussian(&mut rng, d_out, rank, 3.0).unwrap(),
                rank as f64,
            ).unwrap();
            let adapter = Adapter::new("p").with_target("t", pair).unwrap();
            let once: Adapter<f64> = decode(&encode(&adapter).unwrap()).unwrap().into_adapter().unwrap();
            let twice: Adapter<f64> = decode(&encode(&once).unwrap()).unwrap().into_adapter().unwrap();
            prop_assert_eq!(&once, &adapter.quantized());
            prop_assert_eq!(encode(&once).unwrap(), encode(&twice).unwrap());
        }
    }
}
