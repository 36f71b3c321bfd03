//! Binary tensor container shared by client updates, global checkpoints and
//! dataset dumps.
//!
//! ```text
//! "FMKI" | version u32 | round u32 | client u32 | count u32
//! count × ( name_len u16 | name | rank u8 | rank × dim u32 | f64 payload )
//! crc32 u32   (over every preceding byte)
//! ```
//! All integers and floats are little-endian.

use std::collections::HashSet;

use crate::error::{Error, ParseError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FMKI";
pub const VERSION: u32 = 1;
/// Client id used for server-side checkpoints.
pub const GLOBAL_CLIENT: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub round_index: u32,
    pub client_id: u32,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn bit_eq(&self, other: &Container) -> bool {
        self.round_index == other.round_index
            && self.client_id == other.client_id
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let count = u32::try_from(c.tensors.len()).map_err(|_| Error::Input("too many tensors".into()))?;
    let payload: usize = c.tensors.iter().map(|(n, t)| 2 + n.len() + 1 + 4 * t.rank() + 8 * t.numel()).sum();
    let mut out = Vec::with_capacity(20 + payload + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&c.round_index.to_le_bytes());
    out.extend_from_slice(&c.client_id.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    let mut seen = HashSet::new();
    for (name, t) in &c.tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Input(format!("duplicate tensor name `{name}`")));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::Input(format!("tensor name too long: {} bytes", name.len())))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Input(format!("tensor `{name}` has rank {}", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Input(format!("tensor `{name}` dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ParseError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ParseError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container, ParseError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.array::<4>()?;
    if magic != MAGIC {
        return Err(ParseError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ParseError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let round_index = r.u32()?;
    let client_id = r.u32()?;
    let count = r.u32()? as usize;

    let mut tensors = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| ParseError::Utf8)?.to_owned();
        let rank = r.array::<1>()?[0] as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<u32>, _>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| ParseError::Shape {
                name: name.clone(),
                dims: dims.clone(),
            })?;
        let payload = r.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        let tensor = Tensor::new(shape, data).map_err(|_| ParseError::Shape {
            name: name.clone(),
            dims: dims.clone(),
        })?;
        if !seen.insert(name.clone()) {
            return Err(ParseError::DuplicateName(name));
        }
        tensors.push((name, tensor));
    }

    let body_end = r.pos;
    let stored = r.u32()?;
    let extra = bytes.len() - r.pos;
    if extra > 0 {
        return Err(ParseError::TrailingBytes(extra));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(ParseError::Checksum { stored, computed });
    }
    Ok(Container {
        round_index,
        client_id,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            round_index: 3,
            client_id: 2,
            tensors: vec![
                ("w".into(), Tensor::new([2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
                ("b".into(), Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap()),
                ("s".into(), Tensor::scalar(7.0)),
            ],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let back = decode(&encode(&c).unwrap()).unwrap();
        assert!(back.bit_eq(&c));
    }

    #[test]
    fn empty_container_is_valid() {
        let c = Container {
            round_index: 0,
            client_id: 0,
            tensors: vec![],
        };
        let bytes = encode(&c).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(decode(&bytes).unwrap(), c);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(ParseError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(ParseError::Version { found: 2, expected: 1 })));
        assert!(matches!(decode(&bytes[..30]), Err(ParseError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(ParseError::TrailingBytes(1))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 1;
        assert!(matches!(decode(&bad), Err(ParseError::Checksum { .. })));
        // first tensor's name length
        let mut bad = bytes;
        bad[20] = 0xff;
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&[0; 8]);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(3);
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            decode(&bytes),
            Err(ParseError::Shape { .. } | ParseError::Truncated { .. })
        ));
    }
}
