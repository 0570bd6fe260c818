use patchprobe::store::{
    decode_npy, encode_npy, load_embeddings, save_embeddings, sidecar_path, PatchEmbeddingSet, SetMeta, StoreError,
    Variant,
};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..40, 1usize..64).prop_flat_map(|(n, d)| {
        (
            Just(n),
            Just(d),
            prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL, n * d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn npy_round_trip((n, d, data) in matrix()) {
        let bytes = encode_npy(n, d, &data);
        prop_assert_eq!(bytes.len() % 64, (n * d * 4) % 64);
        let (n2, d2, back) = decode_npy(&bytes).unwrap();
        prop_assert_eq!((n2, d2), (n, d));
        prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn file_round_trip((n, d, data) in matrix()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.npy");
        let set = PatchEmbeddingSet::new(SetMeta::new("doc", "m", Variant::Signal).with_grid(1, n), n, d, data).unwrap();
        save_embeddings(&set, &path).unwrap();
        prop_assert_eq!(load_embeddings(&path).unwrap(), set);
    }
}

#[test]
fn every_truncation_is_rejected() {
    let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.25).collect();
    let bytes = encode_npy(3, 4, &data);
    let header_len = bytes.len() - 48;
    for cut in 0..bytes.len() {
        let err = decode_npy(&bytes[..cut]).unwrap_err();
        if cut >= header_len {
            assert!(matches!(err, StoreError::TruncatedPayload { expected: 48, .. }), "cut {cut}: {err:?}");
        } else {
            assert!(matches!(err, StoreError::MalformedHeader(_)), "cut {cut}: {err:?}");
        }
    }
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0; 4]);
    assert!(decode_npy(&extra).is_err());
}

#[test]
fn header_is_numpy_compatible() {
    let bytes = encode_npy(2, 3, &[0.0; 6]);
    assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    assert_eq!((10 + hlen) % 64, 0);
    let header = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
    assert!(header.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }"));
    assert!(header.ends_with('\n'));
}

#[test]
fn sidecar_must_agree_with_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.npy");
    let set = PatchEmbeddingSet::from_rows(SetMeta::new("doc", "m", Variant::Reference), &[[1.0f32, 0.0], [0.0, 1.0]])
        .unwrap();
    save_embeddings(&set, &path).unwrap();
    let side = sidecar_path(&path);
    let text = std::fs::read_to_string(&side).unwrap().replace("\"n_patches\": 2", "\"n_patches\": 3");
    std::fs::write(&side, text).unwrap();
    assert!(matches!(load_embeddings(&path), Err(StoreError::ShapeMismatch { .. })));

    std::fs::remove_file(&side).unwrap();
    assert!(load_embeddings(&path).is_err());
}

#[test]
fn non_finite_payload_is_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.npy");
    let set = PatchEmbeddingSet::from_rows(SetMeta::new("doc", "m", Variant::Reference), &[[1.0f32, 0.0], [0.0, 1.0]])
        .unwrap();
    save_embeddings(&set, &path).unwrap();
    std::fs::write(&path, encode_npy(2, 2, &[1.0, f32::NAN, 0.0, 1.0])).unwrap();
    assert!(matches!(load_embeddings(&path), Err(StoreError::NonFiniteValue { row: 0, col: 1, .. })));
}
