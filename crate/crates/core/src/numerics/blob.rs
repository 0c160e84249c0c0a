//! `CDT1` tensor blobs: the magic bytes `CDT1`, a little-endian `u32` rank,
//! `rank` little-endian `u32` extents, then the row-major values as
//! little-endian `f64`.

use std::io::{Read, Write};

use super::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CDT1";

/// Size in bytes of the encoding of a tensor with this shape.
pub fn encoded_len(shape: &[usize]) -> usize {
    4 + 4 + 4 * shape.len() + 8 * shape.iter().product::<usize>()
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t.shape()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_to(t: &Tensor, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!(
            "CDT1 blob truncated: need {n} more bytes, have {}",
            bytes.len()
        )));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8]) -> Result<u32> {
    let b = take(bytes, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Decodes one blob from the front of `bytes`, returning the tensor and the
/// number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut rest = bytes;
    if take(&mut rest, 4)? != MAGIC {
        return Err(Error::Format("missing CDT1 magic".into()));
    }
    let rank = take_u32(&mut rest)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible CDT1 rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| take_u32(&mut rest).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format(format!("CDT1 shape {shape:?} overflows")))?;
    let raw = take(&mut rest, n.saturating_mul(8))?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let t = Tensor::new(shape, data)?;
    Ok((t, bytes.len() - rest.len()))
}

pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading CDT1 blob: {e}")))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after CDT1 blob",
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        let mut expected = b"CDT1".to_vec();
        expected.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(b, expected);
        assert_eq!(b.len(), encoded_len(t.shape()));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::numerics::Rng::new(seed);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.next_u64() >> 2)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = encode(&t);
            let (back, used) = decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
