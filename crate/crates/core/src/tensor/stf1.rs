//! STF1 tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"STF1"
//! dtype   u32      0 = f32, 1 = f64
//! rank    u32
//! extents u32 x rank
//! payload row-major elements in the declared dtype
//! ```

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"STF1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stf1Header {
    pub dtype_code: u8,
    pub shape: Vec<usize>,
}

impl Stf1Header {
    fn elem_bytes(&self) -> usize {
        if self.dtype_code == 0 {
            4
        } else {
            8
        }
    }

    pub fn header_len(&self) -> usize {
        12 + 4 * self.shape.len()
    }
}

pub fn encode_stf1<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + t.bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(T::DTYPE_CODE as u32).to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

/// Parses only the header; used for shape validation without touching the payload.
pub fn parse_header(bytes: &[u8], path: &Path) -> Result<Stf1Header> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "corrupt STF1 header: bad magic"));
    }
    let dtype = read_u32(bytes, 4).unwrap();
    if dtype > 1 {
        return Err(Error::format(
            path,
            format!("corrupt STF1 header: unknown dtype code {dtype}"),
        ));
    }
    let rank = read_u32(bytes, 8).unwrap() as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let e = read_u32(bytes, 12 + 4 * i)
            .ok_or_else(|| Error::format(path, "corrupt STF1 header: truncated extents"))?;
        if e == 0 {
            return Err(Error::format(path, "corrupt STF1 header: zero extent"));
        }
        shape.push(e as usize);
    }
    Ok(Stf1Header {
        dtype_code: dtype as u8,
        shape,
    })
}

/// Decodes an STF1 buffer, converting the payload to `T` if the stored dtype differs.
pub fn decode_stf1<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let header = parse_header(bytes, path)?;
    let numel: usize = header.shape.iter().product();
    let payload = &bytes[header.header_len()..];
    let width = header.elem_bytes();
    if payload.len() != numel * width {
        return Err(Error::format(
            path,
            format!(
                "STF1 payload is {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                numel * width
            ),
        ));
    }
    let data: Vec<T> = if header.dtype_code == T::DTYPE_CODE {
        payload.chunks_exact(width).map(T::read_le).collect()
    } else if header.dtype_code == 0 {
        payload
            .chunks_exact(4)
            .map(|c| T::of(f32::read_le(c) as f64))
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| T::of(f64::read_le(c)))
            .collect()
    };
    Tensor::new(header.shape, data)
}

pub fn write_stf1<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_stf1(t)).map_err(|e| Error::io(path, e))
}

pub fn read_stf1<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stf1(&bytes, path)
}

/// Reads just the header of an STF1 file.
pub fn read_stf1_header(path: impl AsRef<Path>) -> Result<Stf1Header> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; 12];
    f.read_exact(&mut head)
        .map_err(|_| Error::format(path, "corrupt STF1 header: truncated"))?;
    let rank = read_u32(&head, 8).unwrap() as usize;
    if rank > 64 {
        return Err(Error::format(
            path,
            format!("corrupt STF1 header: rank {rank}"),
        ));
    }
    let mut ext = vec![0u8; 4 * rank];
    f.read_exact(&mut ext)
        .map_err(|_| Error::format(path, "corrupt STF1 header: truncated extents"))?;
    head.extend_from_slice(&ext);
    parse_header(&head, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_bit_exact() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_stf1(&t);
        assert_eq!(&bytes[..4], b"STF1");
        assert_eq!(&bytes[4..8], &[0, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[3, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 6 * 4);
    }

    #[test]
    fn f64_roundtrip_is_bitwise() {
        let t = Tensor::<f64>::new(vec![3], vec![0.1, -2.5e-300, f64::MAX]).unwrap();
        let back: Tensor<f64> = decode_stf1(&encode_stf1(&t), Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_corrupt_headers() {
        let p = Path::new("mem");
        assert!(decode_stf1::<f32>(b"STF2\0\0\0\0\0\0\0\0", p).is_err());
        let mut bytes = encode_stf1(&Tensor::<f32>::zeros(vec![2]));
        bytes[4] = 7;
        assert!(decode_stf1::<f32>(&bytes, p).is_err());
        let bytes = encode_stf1(&Tensor::<f32>::zeros(vec![2]));
        assert!(decode_stf1::<f32>(&bytes[..bytes.len() - 1], p).is_err());
    }

    #[test]
    fn converts_between_dtypes() {
        let t = Tensor::<f32>::new(vec![2], vec![1.5, -0.25]).unwrap();
        let back: Tensor<f64> = decode_stf1(&encode_stf1(&t), Path::new("mem")).unwrap();
        assert_eq!(back.data(), &[1.5, -0.25]);
    }
}
