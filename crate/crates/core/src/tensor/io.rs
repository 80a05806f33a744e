//! `.etz` tensor files.
//!
//! Layout: magic `45 50 54 4E` ("EPTN"), `u8` version (1), `u8` dtype
//! (0 = f32), `u8` ndim, `ndim` little-endian `u32` dims, then the row-major
//! little-endian `f32` payload. No padding, no compression. Values are
//! narrowed to `f32` on write and widened back to `f64` on read.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EPTN";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("too many dimensions: {}", t.ndim())));
    }
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 7 {
        return Err(Error::Format("truncated header".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    let header = 7 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("truncated shape".into()));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * count {
        return Err(Error::Format(format!(
            "payload of {} bytes does not match shape {shape:?}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn tensor_write(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)?)?;
    Ok(())
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<Tensor> {
    tensor_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DeterministicRng;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = tensor_to_bytes(&t).unwrap();
        assert_eq!(&b[..7], &[0x45, 0x50, 0x54, 0x4E, 1, 0, 2]);
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 23);
    }

    #[test]
    fn scalar_round_trips() {
        let t = Tensor::scalar(0.25);
        let back = tensor_from_bytes(&tensor_to_bytes(&t).unwrap()).unwrap();
        assert!(back.bit_eq(&t));
        assert_eq!(back.ndim(), 0);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut b = tensor_to_bytes(&Tensor::zeros(&[3])).unwrap();
        b[0] = b'X';
        assert!(matches!(tensor_from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn payload_length_mismatch_is_rejected() {
        let mut b = tensor_to_bytes(&Tensor::zeros(&[3])).unwrap();
        b.pop();
        assert!(matches!(tensor_from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.etz");
        let mut rng = DeterministicRng::new(9);
        let t = Tensor::randn(&[2, 3, 4], &mut rng).map(|v| v as f32 as f64);
        tensor_write(&t, &path).unwrap();
        assert!(tensor_read(&path).unwrap().bit_eq(&t));
        assert!(tensor_read(dir.path().join("missing.etz")).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let mut rng = DeterministicRng::new(seed);
            let t = Tensor::randn(&shape, &mut rng);
            let bytes = tensor_to_bytes(&t).unwrap();
            let back = tensor_from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(tensor_to_bytes(&back).unwrap(), bytes);
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}
