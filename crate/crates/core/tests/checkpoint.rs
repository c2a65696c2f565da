use proptest::prelude::*;
use retina_core::nn::{ModelCheckpoint, ParamSet, Tensor};

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        proptest::collection::vec(-1e6f32..1e6, n).prop_map(move |v| Tensor::new(shape.clone(), v.into_iter().map(f64::from).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Values representable in f32 survive the byte format exactly, and the
    /// byte encoding itself is a fixed point.
    #[test]
    fn bytes_round_trip(tensors in proptest::collection::btree_map("[a-z]{1,6}(\\.[a-z]{1,4})?", tensor_strategy(), 0..6), note in ".*") {
        let mut p = ParamSet::new();
        for (k, t) in &tensors {
            p.insert(k, t.clone());
        }
        let mut ck = ModelCheckpoint::from_params(&p);
        ck.set_meta("note", &note).unwrap();
        let bytes = ck.to_bytes();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.params(), p);
        prop_assert_eq!(back.meta::<String>("note").unwrap(), note);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn any_truncation_is_rejected(cut in 0usize..200) {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![4, 5], (0..20).map(f64::from).collect()).unwrap());
        let bytes = ModelCheckpoint::from_params(&p).to_bytes();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(ModelCheckpoint::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.ck");
    let mut p = ParamSet::new();
    p.insert("a", Tensor::vector(&[0.5, -1.25, 3.0]));
    let ck = ModelCheckpoint::from_params(&p);
    ck.save(&path).unwrap();
    assert_eq!(ModelCheckpoint::load(&path).unwrap(), ck);
    assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    assert!(ModelCheckpoint::load(&dir.path().join("missing.ck")).is_err());
}
