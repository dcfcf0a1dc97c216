//! TZR on-disk tensor format.
//!
//! Layout, all little-endian, no padding and no footer:
//!
//! | bytes            | content                       |
//! |------------------|-------------------------------|
//! | 0..4             | ASCII `TZR1`                  |
//! | 4..8             | rank as `u32`                 |
//! | 8..8+4·rank      | extents as `u32`              |
//! | rest             | row-major `f32` payload       |

use std::fs;
use std::path::Path;

use super::{Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TZR1";

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > MAX_RANK {
        return Err(Error::Size(format!("rank {} cannot be encoded", t.rank())));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        let e = u32::try_from(e)
            .map_err(|_| Error::Size(format!("extent {e} does not fit in u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset,
            message: format!("truncated {what}"),
        })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    match bytes.get(0..4) {
        Some(m) if m == MAGIC => {}
        Some(m) => {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:?}", String::from_utf8_lossy(m)),
            })
        }
        None => {
            return Err(Error::Format {
                offset: 0,
                message: "truncated magic".into(),
            })
        }
    }
    let rank = read_u32(bytes, 4, "rank")? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format {
            offset: 4,
            message: format!("rank {rank} outside 1..={MAX_RANK}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let offset = 8 + 4 * i;
        let e = read_u32(bytes, offset, "extent")? as usize;
        if e == 0 {
            return Err(Error::Format {
                offset,
                message: "zero extent".into(),
            });
        }
        count = count.checked_mul(e).ok_or_else(|| Error::Format {
            offset,
            message: "element count overflows".into(),
        })?;
        shape.push(e);
    }
    let start = 8 + 4 * rank;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != count * 4 {
        return Err(Error::Format {
            offset: start + payload.len().min(count * 4),
            message: format!(
                "payload holds {} bytes, shape {:?} needs {}",
                payload.len(),
                shape,
                count * 4
            ),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_hand_built_file() {
        let mut bytes = b"TZR1".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        let t = decode_tensor(&bytes).unwrap();
        assert_eq!(t.shape(), &[2]);
        assert_eq!(t.data(), &[1.0, 2.0]);
    }

    #[test]
    fn header_and_payload_sizes() {
        // magic + rank + 3 extents + one value
        let t = Tensor::zeros(vec![1, 1, 1]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 12 + 4);
        let flat = encode_tensor(&Tensor::zeros(vec![1]).unwrap()).unwrap();
        assert_eq!(flat.len(), 16);
        assert_eq!(&bytes[..4], b"TZR1");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode_tensor(&Tensor::zeros(vec![2]).unwrap()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        match decode_tensor(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_rank_and_truncation() {
        let mut bytes = encode_tensor(&Tensor::zeros(vec![2, 2]).unwrap()).unwrap();
        let good = bytes.clone();
        bytes[4..8].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            decode_tensor(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
        let short = &good[..good.len() - 1];
        assert!(matches!(decode_tensor(short), Err(Error::Format { .. })));
        assert!(matches!(
            decode_tensor(&good[..10]),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn nan_payload_is_a_validation_error() {
        let mut bytes = encode_tensor(&Tensor::zeros(vec![1]).unwrap()).unwrap();
        bytes[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn file_round_trip_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.25, 3.0, 1e-7, -0.0]).unwrap();
        let a = dir.path().join("a.tzr");
        let b = dir.path().join("b.tzr");
        write_tensor(&t, &a).unwrap();
        write_tensor(&t, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = read_tensor(&a).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(
                any::<f32>().prop_filter("finite", |v| v.is_finite()),
                n,
            )
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn encode_decode_is_bit_exact(t in arb_tensor()) {
            let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
