//! IDX array format: `00 00 <type> <rank>`, `rank` big-endian `u32` dims, payload.

use std::borrow::Cow;
use std::io::Read;

use flate2::read::GzDecoder;
use thiserror::Error;

/// Unsigned-byte element type, the only one MNIST uses.
pub const TYPE_U8: u8 = 0x08;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic at byte {offset}: expected two zero bytes, found {found:02x?}")]
    BadMagic { offset: usize, found: [u8; 2] },
    #[error("unsupported IDX type code 0x{code:02x} at byte {offset}")]
    UnsupportedType { offset: usize, code: u8 },
    #[error("IDX {section} truncated at byte {offset}: expected {expected} bytes, got {actual}")]
    Truncated {
        section: &'static str,
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("IDX payload followed by {extra} trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("IDX dimensions {dims:?} overflow the address space")]
    Overflow { dims: Vec<usize> },
    #[error("gzip stream is corrupt: {0}")]
    Gzip(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub type_code: u8,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Parses an uncompressed IDX byte stream of unsigned bytes.
pub fn parse_idx(bytes: &[u8]) -> Result<(IdxHeader, Vec<u8>), IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            section: "magic",
            offset: 0,
            expected: 4,
            actual: bytes.len(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic {
            offset: 0,
            found: [bytes[0], bytes[1]],
        });
    }
    let type_code = bytes[2];
    if type_code != TYPE_U8 {
        return Err(IdxError::UnsupportedType { offset: 2, code: type_code });
    }
    let rank = bytes[3] as usize;
    let dims_end = 4 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(IdxError::Truncated {
            section: "dimensions",
            offset: 4,
            expected: 4 * rank,
            actual: bytes.len() - 4,
        });
    }
    let dims: Vec<usize> = bytes[4..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| IdxError::Overflow { dims: dims.clone() })?;
    let actual = bytes.len() - dims_end;
    if actual < expected {
        return Err(IdxError::Truncated {
            section: "payload",
            offset: dims_end,
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(IdxError::TrailingBytes {
            offset: dims_end + expected,
            extra: actual - expected,
        });
    }
    Ok((IdxHeader { type_code, dims }, bytes[dims_end..].to_vec()))
}

/// Encodes unsigned bytes as an IDX stream.
pub fn write_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "IDX dims/data mismatch");
    assert!(dims.len() <= u8::MAX as usize);
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&[0, 0, TYPE_U8, dims.len() as u8]);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Inflates gzip input (detected by its `1f 8b` prefix); passes anything else through.
pub fn maybe_gunzip(bytes: &[u8]) -> Result<Cow<'_, [u8]>, IdxError> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| IdxError::Gzip(e.to_string()))?;
        Ok(Cow::Owned(out))
    } else {
        Ok(Cow::Borrowed(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_encoded_two_by_two_image() {
        let bytes = [
            0x00, 0x00, 0x08, 0x03, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0xAA, 0xBB, 0xCC, 0xDD,
        ];
        let (h, data) = parse_idx(&bytes).unwrap();
        assert_eq!(h.type_code, 0x08);
        assert_eq!(h.dims, vec![1, 2, 2]);
        assert_eq!(data, vec![0xAA, 0xBB, 0xCC, 0xDD]);
    }

    #[test]
    fn empty_label_array() {
        let (h, data) = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(h.dims, vec![0]);
        assert!(data.is_empty());
    }

    #[test]
    fn one_byte_short_names_lengths() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 1, 2];
        let err = parse_idx(&bytes).unwrap_err();
        assert_eq!(
            err,
            IdxError::Truncated {
                section: "payload",
                offset: 8,
                expected: 3,
                actual: 2
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("expected 3") && msg.contains("got 2"), "{msg}");
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(parse_idx(&[1, 0, 8, 1]), Err(IdxError::BadMagic { offset: 0, .. })));
        assert!(matches!(
            parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0]),
            Err(IdxError::UnsupportedType { offset: 2, code: 0x0d })
        ));
        assert!(matches!(
            parse_idx(&[0, 0, 8, 2, 0, 0, 0, 1]),
            Err(IdxError::Truncated { section: "dimensions", .. })
        ));
        assert!(matches!(
            parse_idx(&[0, 0, 8, 1, 0, 0, 0, 1, 7, 7]),
            Err(IdxError::TrailingBytes { offset: 9, extra: 1 })
        ));
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let raw = write_idx(&[3], &[1, 2, 3]);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(maybe_gunzip(&gz).unwrap().as_ref(), raw.as_slice());
        assert_eq!(maybe_gunzip(&raw).unwrap().as_ref(), raw.as_slice());
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(dims in proptest::collection::vec(0usize..5, 1..4), seed in any::<u8>()) {
            let n: usize = dims.iter().product();
            let data: Vec<u8> = (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let (h, back) = parse_idx(&write_idx(&dims, &data)).unwrap();
            prop_assert_eq!(h.dims, dims);
            prop_assert_eq!(back, data);
        }
    }
}
