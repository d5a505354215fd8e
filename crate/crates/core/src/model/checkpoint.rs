//! Binary parameter container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CLRE" | version | class_no | latent_dim
//! repeated until EOF:
//!     name_len | name (UTF-8) | rank | dims… | payload (f64 LE, product(dims) values)
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::numkit::Tensor;

pub const MAGIC: &[u8; 4] = b"CLRE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {found:02x?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("checkpoint truncated at byte {offset}: {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("parameter name at byte {offset} is not UTF-8")]
    Name { offset: usize },
    #[error("parameter `{name}` has inconsistent dimensions {dims:?}")]
    Dims { name: String, dims: Vec<usize> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub class_no: u32,
    pub latent_dim: u32,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [FORMAT_VERSION, self.class_no, self.latent_dim] {
            w.write_all(&v.to_le_bytes())?;
        }
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = cur.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let class_no = cur.u32("class_no")?;
        let latent_dim = cur.u32("latent_dim")?;
        let mut entries = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32("name length")? as usize;
            let offset = cur.pos;
            let name = std::str::from_utf8(cur.take(name_len, "name")?)
                .map_err(|_| CheckpointError::Name { offset })?
                .to_string();
            let rank = cur.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(cur.u32("dimension")? as usize);
            }
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some())
                .ok_or_else(|| CheckpointError::Dims {
                    name: name.clone(),
                    dims: dims.clone(),
                })?;
            let payload = cur.take(count * 8, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(dims.clone(), data).map_err(|_| CheckpointError::Dims {
                name: name.clone(),
                dims,
            })?;
            entries.push((name, tensor));
        }
        Ok(Self {
            class_no,
            latent_dim,
            entries,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.pos,
                what,
            }),
        }
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            class_no: 3,
            latent_dim: 2,
            entries: vec![
                ("a.weight".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
                ("a.bias".into(), Tensor::vector(vec![0.25])),
                ("empty".into(), Tensor::zeros(&[0, 4])),
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"CLRE");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &8u32.to_le_bytes());
        assert_eq!(&bytes[20..28], b"a.weight");
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.entries.len(), 3);
        for ((n1, t1), (n2, t2)) in ck.entries.iter().zip(&back.entries) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated { .. })
        ));
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version(9))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic { .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(
            values in proptest::collection::vec(proptest::num::f64::ANY, 0..40),
            class_no in 1u32..20,
        ) {
            let n = values.len();
            let ck = Checkpoint {
                class_no,
                latent_dim: 7,
                entries: vec![("p".into(), Tensor::new(vec![n], values).unwrap())],
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.class_no, class_no);
            prop_assert!(back.entries[0].1.bit_eq(&ck.entries[0].1));
        }
    }
}
