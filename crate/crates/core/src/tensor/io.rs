//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UMTN" | version: u16 = 1 | dtype: u8 (0=f32, 1=f64, 2=u8) | rank: u8
//!        | extents: rank x u64 | data: row-major, little-endian
//! ```

use std::path::Path;

use super::{DType, Storable, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UMTN";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 1 + 1;

pub fn encode<T: Storable>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * tensor.rank() + tensor.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE as u8);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

/// Reads the dtype of an encoded tensor without decoding the payload.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing UMTN magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported UMTN version {version}")));
    }
    DType::from_code(bytes[6]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[6])))
}

/// Decodes a tensor; returns it with the number of bytes consumed.
pub fn decode_prefix<T: Storable>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let dtype = peek_dtype(bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {dtype:?}, expected {:?}",
            T::DTYPE
        )));
    }
    let rank = bytes[7] as usize;
    let dims_end = HEADER + 8 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format("truncated extents".into()));
    }
    let shape: Vec<usize> = bytes[HEADER..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let width = dtype.size();
    let end = dims_end + n * width;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "truncated payload: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let data = bytes[dims_end..end].chunks_exact(width).map(T::read_le).collect();
    Ok((Tensor::from_vec(&shape, data)?, end))
}

pub fn decode<T: Storable>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

pub fn write<T: Storable>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Storable>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_vec(&[2, 1], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"UMTN");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 2);
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn rejects_wrong_dtype_and_truncation() {
        let t = Tensor::from_vec(&[3], vec![1u8, 2, 3]).unwrap();
        let bytes = encode(&t);
        assert!(decode::<f32>(&bytes).is_err());
        assert!(decode::<u8>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<u8>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip(dims in proptest::collection::vec(1usize..4, 1..4),
                          vals in proptest::collection::vec(any::<f64>(), 64)) {
            let n: usize = dims.iter().product();
            let t = Tensor::from_vec(&dims, vals[..n].to_vec()).unwrap();
            let back: Tensor<f64> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
