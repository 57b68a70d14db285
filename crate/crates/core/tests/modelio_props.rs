use proptest::prelude::*;
use rankfold::modelio::{Tensor, TensorData};
use rankfold::{sym_eig, synth_calib, DType, EncoderSpec, Matrix, TensorArchive};

fn tensor(index: usize) -> impl Strategy<Value = Tensor> {
    let shape = prop::collection::vec(0usize..5, 0..4);
    (shape, any::<bool>()).prop_flat_map(move |(shape, wide)| {
        let n: usize = shape.iter().product();
        let name = format!("t{index}");
        if wide {
            prop::collection::vec(any::<f64>(), n)
                .prop_map(move |d| Tensor::new(name.clone(), shape.clone(), TensorData::F64(d)).unwrap())
                .boxed()
        } else {
            prop::collection::vec(any::<f32>(), n)
                .prop_map(move |d| Tensor::new(name.clone(), shape.clone(), TensorData::F32(d)).unwrap())
                .boxed()
        }
    })
}

fn archive() -> impl Strategy<Value = TensorArchive> {
    (0usize..6, prop::collection::btree_map("[a-z.]{1,8}", "[ -~]{0,12}", 0..4)).prop_flat_map(|(n, meta)| {
        (0..n).map(tensor).collect::<Vec<_>>().prop_map(move |tensors| {
            let mut a = TensorArchive::new();
            for t in tensors {
                a.push(t).unwrap();
            }
            for (k, v) in &meta {
                a.set_meta(k.clone(), v.clone());
            }
            a
        })
    })
}

fn assert_bit_equal(a: &TensorArchive, b: &TensorArchive) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        assert!(x.bit_eq(y), "{} differs", x.name);
    }
    assert_eq!(a.metadata(), b.metadata());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn archive_round_trips_bit_exactly(a in archive()) {
        let bytes = a.to_bytes();
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        assert_bit_equal(&a, &back);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_bytes_never_panic(a in archive(), pos in any::<prop::sample::Index>(), byte in any::<u8>(), cut in any::<prop::sample::Index>()) {
        let mut bytes = a.to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= byte | 1;
        let _ = TensorArchive::from_bytes(&bytes);
        let _ = TensorArchive::from_bytes(&bytes[..cut.index(bytes.len())]);
    }
}

#[test]
fn edge_archives() {
    let empty = TensorArchive::new();
    assert_bit_equal(&empty, &TensorArchive::from_bytes(&empty.to_bytes()).unwrap());
    let mut one = TensorArchive::new();
    one.push_matrix("m", &Matrix::<f64>::identity(3), DType::F64).unwrap();
    assert_bit_equal(&one, &TensorArchive::from_bytes(&one.to_bytes()).unwrap());
}

#[test]
fn noiseless_calibration_is_low_rank() {
    let spec = EncoderSpec::toy();
    for rank in [1, 4, 7] {
        let calib = synth_calib::<f64>(&spec, 6, rank, 0.0, 9).unwrap();
        let pooled = Matrix::vstack(calib.clips()).unwrap();
        let mean = pooled.column_means();
        let centered = pooled.add_row(&mean.iter().map(|m| -m).collect::<Vec<_>>()).unwrap();
        let eig = sym_eig(&centered.transpose().matmul(&centered).unwrap()).unwrap();
        let top = eig.eigenvalues[0];
        let count = eig.eigenvalues.iter().filter(|&&v| v > 1e-9 * top).count();
        assert!(count <= rank + 1, "rank {rank}: {count} eigenvalues above threshold");
    }
}
