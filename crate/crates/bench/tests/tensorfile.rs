use proptest::prelude::*;
use ssct_bench::tensorfile::{Payload, TensorFile, MAGIC, VERSION};
use ssct_bench::BenchError;

fn dims_and_len() -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(1u64..5, 0..4)
}

proptest! {
    #[test]
    fn f64_files_roundtrip_bit_exactly(dims in dims_and_len(), seed in any::<u64>()) {
        let n: u64 = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i + 1) >> 2)).collect();
        let t = TensorFile::new(dims.clone(), Payload::F64(data.clone())).unwrap();
        let back = TensorFile::from_bytes(&t.to_bytes()).unwrap();
        prop_assert_eq!(back.dims(), &dims[..]);
        match back.payload() {
            Payload::F64(v) => prop_assert!(v.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits())),
            _ => prop_assert!(false, "dtype changed"),
        }
    }

    #[test]
    fn f32_files_roundtrip_bit_exactly(dims in dims_and_len(), values in prop::collection::vec(any::<f32>(), 64)) {
        let n = dims.iter().product::<u64>() as usize;
        let data: Vec<f32> = values.into_iter().cycle().take(n).collect();
        let t = TensorFile::new(dims.clone(), Payload::F32(data.clone())).unwrap();
        let back = TensorFile::from_bytes(&t.to_bytes()).unwrap();
        prop_assert_eq!(back.dims(), &dims[..]);
        match back.payload() {
            Payload::F32(v) => prop_assert!(v.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits())),
            _ => prop_assert!(false, "dtype changed"),
        }
    }

    #[test]
    fn truncated_files_are_rejected(cut in 0usize..40) {
        let t = TensorFile::new(vec![2, 3], Payload::F64(vec![1.0; 6])).unwrap();
        let bytes = t.to_bytes();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(TensorFile::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn header_layout_is_stable() {
    let t = TensorFile::new(vec![2], Payload::F32(vec![1.0, 2.0])).unwrap();
    let b = t.to_bytes();
    assert_eq!(&b[..4], MAGIC);
    assert_eq!(u16::from_le_bytes([b[4], b[5]]), VERSION);
    assert_eq!(b[6], 1, "f32 dtype code");
    assert_eq!(b[7], 1, "rank");
    assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
    assert_eq!(f32::from_le_bytes(b[16..20].try_into().unwrap()), 1.0);
    assert_eq!(b.len(), 24);
}

#[test]
fn mismatched_payload_length_is_rejected() {
    assert!(TensorFile::new(vec![2, 2], Payload::F64(vec![0.0; 3])).is_err());
}

#[test]
fn corrupt_headers_are_rejected() {
    let good = TensorFile::new(vec![1], Payload::F64(vec![0.5])).unwrap().to_bytes();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(TensorFile::from_bytes(&bad_magic), Err(BenchError::Format(_))));
    let mut bad_version = good.clone();
    bad_version[4] = 99;
    assert!(TensorFile::from_bytes(&bad_version).is_err());
    let mut bad_dtype = good.clone();
    bad_dtype[6] = 7;
    assert!(TensorFile::from_bytes(&bad_dtype).is_err());
    let mut trailing = good;
    trailing.push(0);
    assert!(TensorFile::from_bytes(&trailing).is_err());
}

#[test]
fn files_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let a = ndarray::Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 12 + j * 4 + k) as f64 / 7.0);
    let path = dir.path().join("a.ssct");
    TensorFile::from_array3(&a).write(&path).unwrap();
    assert_eq!(TensorFile::read(&path).unwrap().into_array3().unwrap(), a);
    assert!(TensorFile::read(&path).unwrap().into_array2().is_err());
}
