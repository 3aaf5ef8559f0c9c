use basis_select::checkpoint::{
    decode, encode, load_checkpoint, model_to_tensors, save_checkpoint, CheckpointError, Tensor, TensorData,
};
use basis_select::layer::FactorizedLinear;
use basis_select::model::{Layer, ModelConfig, ToyModel};
use proptest::prelude::*;

fn small_model() -> ToyModel {
    let config = ModelConfig {
        context: 2,
        embed_dim: 3,
        hidden: 5,
        blocks: 2,
        ..ModelConfig::default()
    };
    let mut model = ToyModel::new(config, 17);
    let (w, b) = model.blocks[1].effective();
    model.blocks[1] = Layer::Factorized(FactorizedLinear::from_dense(&w, &b, 1, 3).unwrap());
    model
}

#[test]
fn file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bsck");
    let model = ToyModel::new(ModelConfig::default(), 99);
    save_checkpoint(&path, &model).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let (a, b) = (model_to_tensors(&model), model_to_tensors(&back));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.bits_eq(y)));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1, "temp file left behind");
}

#[test]
fn every_single_byte_flip_is_detected() {
    let bytes = encode(&model_to_tensors(&small_model())).unwrap();
    for pos in 0..bytes.len() {
        for mask in [0x01u8, 0x80, 0xff] {
            let mut bad = bytes.clone();
            bad[pos] ^= mask;
            match decode(&bad) {
                Err(CheckpointError::BadMagic { .. }) => assert!(pos < 4),
                Err(CheckpointError::BadVersion { .. }) => assert!((4..6).contains(&pos)),
                Err(CheckpointError::CrcMismatch { start, end, .. }) => {
                    assert!(pos >= 6);
                    assert_eq!((start, end), (0, bytes.len() - 4));
                }
                other => panic!("flip at {pos} not detected: {other:?}"),
            }
        }
    }
}

#[test]
fn every_truncation_is_an_error() {
    let bytes = encode(&model_to_tensors(&small_model())).unwrap();
    for len in 0..bytes.len() {
        let err = decode(&bytes[..len]).unwrap_err();
        assert!(
            matches!(err, CheckpointError::Truncated { .. } | CheckpointError::CrcMismatch { .. }),
            "length {len}: {err:?}"
        );
    }
}

#[test]
fn crc_message_names_the_region() {
    let mut bytes = encode(&model_to_tensors(&small_model())).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 4;
    let msg = decode(&bytes).unwrap_err().to_string();
    assert!(msg.contains(&format!("0..{}", n - 4)), "{msg}");
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (
        "[a-z.]{1,12}",
        prop::collection::vec(0u64..4, 0..3),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(name, dims, wide, seed)| {
            let n: u64 = dims.iter().product();
            let mut x = seed;
            let mut next = move || {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                x
            };
            let data = if wide {
                TensorData::F64((0..n).map(|_| f64::from_bits(next())).collect())
            } else {
                TensorData::F32((0..n).map(|_| f32::from_bits(next() as u32)).collect())
            };
            Tensor { name, dims, data }
        })
}

proptest! {
    #[test]
    fn arbitrary_tensors_round_trip(tensors in prop::collection::vec(tensor_strategy(), 0..6)) {
        let back = decode(&encode(&tensors).unwrap()).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for (a, b) in tensors.iter().zip(&back) {
            prop_assert!(a.bits_eq(b));
        }
    }
}
