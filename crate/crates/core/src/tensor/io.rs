//! Binary tensor container.
//!
//! ```text
//! offset  size      field
//! 0       8         magic  b"OCRGTNSR"
//! 8       8         rank r (u64, little-endian)
//! 16      8·r       extents (u64 LE each)
//! 16+8r   8·Πext    payload (f64 LE, row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"OCRGTNSR";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

fn take<'a>(bytes: &'a [u8], offset: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::format(offset, format!("truncated while reading {what}")))
}

fn read_u64(bytes: &[u8], offset: usize, what: &str) -> Result<u64> {
    let b = take(bytes, offset, 8, what)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

fn parse(bytes: &[u8]) -> Result<Tensor> {
    if take(bytes, 0, 8, "magic")? != TENSOR_MAGIC {
        return Err(Error::format(0, "bad tensor magic"));
    }
    let rank = read_u64(bytes, 8, "rank")? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::format(8, format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 16 + 8 * i;
        let d = read_u64(bytes, off, "extent")? as usize;
        if d == 0 {
            return Err(Error::format(off, "zero extent"));
        }
        shape.push(d);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(16, "extent product overflows"))?;
    let start = 16 + 8 * rank;
    let payload = take(bytes, start, n * 8, "payload")?;
    if bytes.len() != start + n * 8 {
        return Err(Error::format(start + n * 8, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..8], TENSOR_MAGIC);
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 40);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let t = Tensor::zeros(&[3, 3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        match read_tensor(buf.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 32),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            read_tensor(&b"NOTATENSOR______"[..]),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_bit_identical(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut rng = crate::tensor::RngStream::new(seed);
            let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.next_u64() & !(0x7ff << 52) )).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
