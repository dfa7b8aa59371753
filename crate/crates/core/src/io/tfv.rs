//! The TFV1 container: a flat list of tagged `f32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TFV1"  u32 record_count
//! repeat: u32 tap_id  u32 rank  u32 extents[rank]  f32 data[product(extents)]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TFV1";
const MAX_RANK: u32 = 16;

/// One tagged array of a TFV1 stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub tap: u32,
    pub array: Tensor,
}

impl Record {
    pub fn new(tap: u32, array: Tensor) -> Self {
        Record { tap, array }
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let payload: usize = records
        .iter()
        .map(|r| 8 + 4 * r.array.rank() + 4 * r.array.len())
        .sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.tap.to_le_bytes());
        out.extend_from_slice(&(r.array.rank() as u32).to_le_bytes());
        for &e in r.array.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in r.array.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Offset of `bytes[0]` inside the enclosing file, for error messages.
    base: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], base: usize) -> Self {
        Reader { bytes, pos: 0, base }
    }

    pub(crate) fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.offset(),
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    decode_at(bytes, 0)
}

pub(crate) fn decode_at(bytes: &[u8], base: usize) -> Result<Vec<Record>> {
    let mut rd = Reader::new(bytes, base);
    let magic = rd.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(base, format!("bad magic {magic:?}, expected \"TFV1\"")));
    }
    let count = rd.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for idx in 0..count {
        let tap = rd.u32("tap id")?;
        let at = rd.offset();
        let rank = rd.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::format(at, format!("record {idx}: rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(rd.u32("extent")? as usize);
        }
        let at = rd.offset();
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::format(at, format!("record {idx}: extents {shape:?} overflow")))?;
        let raw = rd.take(n * 4, "array data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        records.push(Record::new(tap, Tensor::new(shape, data)?));
    }
    if !rd.is_done() {
        return Err(Error::format(rd.offset(), "trailing bytes after last record"));
    }
    Ok(records)
}

pub fn write_file(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

const F64_PLANES: usize = 4;

/// Stores `f64` values in the `f32`-only container: the 64 bits of each
/// value are cut into four 16-bit words, each held exactly by an `f32`.
/// Plane 0 carries the most significant word. The result has shape
/// `[4, ...shape]`.
pub fn split_f64(values: &[f64], shape: &[usize]) -> Result<Tensor> {
    let n = values.len();
    if shape.iter().product::<usize>() != n {
        return Err(Error::dim("values", format!("{n} values do not fill shape {shape:?}")));
    }
    let mut data = vec![0.0f32; F64_PLANES * n];
    for (i, &x) in values.iter().enumerate() {
        let bits = x.to_bits();
        for p in 0..F64_PLANES {
            data[p * n + i] = ((bits >> (48 - 16 * p)) & 0xFFFF) as f32;
        }
    }
    let mut full = vec![F64_PLANES];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

/// Inverse of [`split_f64`]; returns the values and the original shape.
pub fn join_f64(t: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    if t.rank() == 0 || t.shape()[0] != F64_PLANES {
        return Err(Error::dim("planes", format!("expected a leading extent of 4, got {:?}", t.shape())));
    }
    let n = t.len() / F64_PLANES;
    let d = t.data();
    let values = (0..n)
        .map(|i| {
            let mut bits = 0u64;
            for p in 0..F64_PLANES {
                let w = d[p * n + i];
                if !(0.0..=65535.0).contains(&w) || w.fract() != 0.0 {
                    return Err(Error::invalid(format!("word {w} of value {i} is not a 16-bit integer")));
                }
                bits = (bits << 16) | w as u64;
            }
            Ok(f64::from_bits(bits))
        })
        .collect::<Result<_>>()?;
    Ok((values, t.shape()[1..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_stream_round_trips() {
        let bytes = encode(&[]);
        assert_eq!(bytes, b"TFV1\0\0\0\0");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn header_layout_is_little_endian() {
        let r = Record::new(7, Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let bytes = encode(&[r]);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &7u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &2u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn truncation_reports_offset() {
        let r = Record::new(0, Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let bytes = encode(&[r]);
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode(&[]);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn split_f64_is_exact_for_awkward_values() {
        let vals = [0.1, 1.0 / 3.0, -0.0, 5e-324, f64::MAX, f64::NEG_INFINITY, 1e-4 + 1e-19, 123456789.123456789];
        let t = split_f64(&vals, &[2, 4]).unwrap();
        assert_eq!(t.shape(), &[4, 2, 4]);
        let (back, shape) = join_f64(&t).unwrap();
        assert_eq!(shape, vec![2, 4]);
        for (a, b) in vals.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn records_round_trip_bit_exactly(
            arrays in proptest::collection::vec(
                (any::<u32>(), proptest::collection::vec(0usize..4, 0..4)), 0..5),
            seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let records: Vec<Record> = arrays
                .into_iter()
                .map(|(tap, shape)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
                    Record::new(tap, Tensor::new(shape, data).unwrap())
                })
                .collect();
            let bytes = encode(&records);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
            prop_assert_eq!(back.len(), records.len());
        }

        #[test]
        fn split_f64_round_trips(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            let t = split_f64(&[x], &[]).unwrap();
            let (back, _) = join_f64(&t).unwrap();
            prop_assert_eq!(back[0].to_bits(), x.to_bits());
            let bad = Tensor::new(vec![4], vec![0.5, 0.0, 0.0, 0.0]).unwrap();
            prop_assert!(join_f64(&bad).is_err());
        }
    }
}
