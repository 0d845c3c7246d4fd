use std::fs;

use binnet::layers::{build_lenet, Layer, LayerSpec, Mode, Network};
use binnet::modelio::{self, packed_payload_len, tensor_name};
use binnet::qmath::QuantSpec;
use binnet::tensor::TensorF32;
use binnet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY_FLOAT: &[u8] = include_bytes!("fixtures/tiny_float.bmx");
const TINY_PACKED: &[u8] = include_bytes!("fixtures/tiny_packed.bmx");

/// qactivation → qfc(4→2) → batchnorm(2) → softmax with hand-set values.
fn tiny() -> Network {
    let mut net = Network::new(
        &[4],
        vec![
            LayerSpec::QActivation {
                act_bit: QuantSpec::BINARY,
            },
            LayerSpec::QFc {
                inputs: 4,
                units: 2,
                act_bit: QuantSpec::BINARY,
            },
            LayerSpec::batchnorm(2),
            LayerSpec::SoftmaxCe,
        ],
        0,
    )
    .unwrap();
    net.param_mut(1, "weight")
        .unwrap()
        .value
        .data_mut()
        .copy_from_slice(&[0.5, -0.25, 0.75, -1.0, -0.5, 0.25, 1.0, 0.0]);
    net.param_mut(2, "gamma").unwrap().value.data_mut().copy_from_slice(&[1.0, 2.0]);
    net.param_mut(2, "beta").unwrap().value.data_mut().copy_from_slice(&[0.0, -0.5]);
    let Layer::BatchNorm(bn) = &mut net.layers_mut()[2] else { unreachable!() };
    bn.running_mean = vec![0.25, -0.125];
    bn.running_var = vec![1.5, 0.5];
    net
}

fn lenet_input(n: usize, seed: u64) -> TensorF32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TensorF32::new([n, 1, 28, 28], (0..n * 784).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
}

/// Regenerates the golden files; run with `--ignored` after a deliberate
/// format change.
#[test]
#[ignore]
fn regenerate_fixtures() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");
    fs::create_dir_all(dir).unwrap();
    let mut net = tiny();
    fs::write(format!("{dir}/tiny_float.bmx"), modelio::to_bytes(&net).unwrap()).unwrap();
    net.pack_binary_weights().unwrap();
    fs::write(format!("{dir}/tiny_packed.bmx"), modelio::to_bytes(&net).unwrap()).unwrap();
}

#[test]
fn golden_fixtures_are_stable() {
    let mut net = tiny();
    assert_eq!(modelio::to_bytes(&net).unwrap(), TINY_FLOAT);
    net.pack_binary_weights().unwrap();
    assert_eq!(modelio::to_bytes(&net).unwrap(), TINY_PACKED);
    for golden in [TINY_FLOAT, TINY_PACKED] {
        let loaded = modelio::from_bytes(golden).unwrap();
        assert_eq!(modelio::to_bytes(&loaded).unwrap(), golden);
    }
}

#[test]
fn golden_packed_fixture_decodes_to_known_values() {
    let net = modelio::from_bytes(TINY_PACKED).unwrap();
    assert!(net.stores_packed());
    let Layer::Linear(fc) = &net.layers()[1] else { panic!() };
    // row 0 signs + − + −, row 1 − + + +, LSB first
    assert_eq!(fc.packed_weight().unwrap().words(), &[0b0101, 0b1110]);
    assert_eq!(fc.weight().data(), &[1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
    let Layer::BatchNorm(bn) = &net.layers()[2] else { panic!() };
    assert_eq!(bn.running_mean, vec![0.25, -0.125]);
    assert_eq!(bn.running_var, vec![1.5, 0.5]);
    assert_eq!(bn.gamma().data(), &[1.0, 2.0]);
    // header: magic, version 1, rank 1, input 4, 4 layers
    assert_eq!(&TINY_PACKED[..20], b"BMX1\x01\0\0\0\x01\0\0\0\x04\0\0\0\x04\0\0\0");
}

#[test]
fn random_lenet_round_trips_bit_exactly() {
    let net = build_lenet(true, 11).unwrap();
    let bytes = modelio::to_bytes(&net).unwrap();
    let back = modelio::from_bytes(&bytes).unwrap();
    assert_eq!(back.specs(), net.specs());
    for (a, b) in net.layers().iter().zip(back.layers()) {
        for ((na, pa), (nb, pb)) in a.params().iter().zip(b.params()) {
            assert_eq!(na, &nb);
            let bits = |t: &TensorF32| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&pa.value), bits(&pb.value));
        }
    }
    assert_eq!(modelio::to_bytes(&back).unwrap(), bytes);
}

#[test]
fn save_and_load_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bmx");
    let net = build_lenet(false, 3).unwrap();
    modelio::save_model(&net, &path).unwrap();
    let back = modelio::load_model(&path).unwrap();
    assert_eq!(modelio::to_bytes(&back).unwrap(), fs::read(&path).unwrap());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1, "no temp file left behind");
    assert!(matches!(modelio::load_model(dir.path().join("missing.bmx")), Err(Error::Io(_))));
}

#[test]
fn version_error_leaves_no_state() {
    let mut bytes = modelio::to_bytes(&tiny()).unwrap();
    bytes[..4].copy_from_slice(b"BMX2");
    assert!(matches!(modelio::from_bytes(&bytes), Err(Error::UnsupportedVersion(2))));
}

#[test]
fn convert_packs_binary_tensors_only() {
    let dir = tempfile::tempdir().unwrap();
    let (float_path, packed_path) = (dir.path().join("f.bmx"), dir.path().join("p.bmx"));
    let net = build_lenet(true, 5).unwrap();
    modelio::save_model(&net, &float_path).unwrap();
    let report = modelio::convert(&float_path, &packed_path).unwrap();
    assert_eq!(report.bytes_before, fs::metadata(&float_path).unwrap().len());
    assert_eq!(report.bytes_after, fs::metadata(&packed_path).unwrap().len());
    assert!(report.ratio >= 15.0, "{report:?}");

    // the file shrinks by exactly the per-tensor savings
    let mut saved = 0usize;
    for i in net.binary_layers() {
        let Layer::Linear(l) = &net.layers()[i] else { panic!() };
        let (rows, cols) = (l.rows(), l.fan_in());
        let packed = packed_payload_len(rows, cols);
        assert_eq!(packed, 8 * rows * cols.div_ceil(64));
        assert!(4 * rows * cols / packed >= 31);
        saved += 4 * rows * cols - packed;
    }
    assert_eq!(report.bytes_before - report.bytes_after, saved as u64);

    let packed = modelio::load_model(&packed_path).unwrap();
    assert!(packed.stores_packed());
    assert!(modelio::verify_equivalence(&net, &packed, 8).unwrap());
    // converting a converted model is refused; re-saving it is byte-identical
    assert!(modelio::convert(&packed_path, dir.path().join("again.bmx")).is_err());
    assert_eq!(modelio::to_bytes(&packed).unwrap(), fs::read(&packed_path).unwrap());
}

#[test]
fn converted_model_round_trip_keeps_packed_outputs() {
    let mut net = build_lenet(true, 8).unwrap();
    net.pack_binary_weights().unwrap();
    let x = lenet_input(4, 1);
    let before = net.logits(&x, Mode::InferPacked).unwrap();
    let back = modelio::from_bytes(&modelio::to_bytes(&net).unwrap()).unwrap();
    assert_eq!(back.default_mode(), Mode::InferPacked);
    assert_eq!(back.logits(&x, Mode::InferPacked).unwrap(), before);
}

#[test]
fn float_only_model_converts_at_ratio_one() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bmx"), dir.path().join("b.bmx"));
    modelio::save_model(&build_lenet(false, 1).unwrap(), &a).unwrap();
    let report = modelio::convert(&a, &b).unwrap();
    assert_eq!(report.ratio, 1.0);
}

#[test]
fn non_finite_weights_are_rejected() {
    let mut bytes = modelio::to_bytes(&tiny()).unwrap();
    // first weight value follows "layer1.weight", dtype, rank and two u64 dims
    let name = tensor_name(1, "weight");
    let at = bytes.windows(name.len()).position(|w| w == name.as_bytes()).unwrap() + name.len() + 1 + 4 + 16;
    bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(modelio::from_bytes(&bytes), Err(Error::Format(_))));
}

/// Byte offset of the first payload word of a packed tensor.
fn packed_payload_offset(bytes: &[u8], name: &str, ndim: usize) -> usize {
    let at = bytes.windows(name.len()).position(|w| w == name.as_bytes()).unwrap();
    assert_eq!(bytes[at + name.len()], 1, "dtype packed1");
    at + name.len() + 1 + 4 + 8 * ndim
}

#[test]
fn flipped_weight_bit_fails_verification() {
    let float = build_lenet(true, 21).unwrap();
    let mut packed = float.clone();
    packed.pack_binary_weights().unwrap();
    let mut bytes = modelio::to_bytes(&packed).unwrap();
    let qconv = float.binary_layers()[0];
    let off = packed_payload_offset(&bytes, &tensor_name(qconv, "weight"), 4);
    bytes[off] ^= 1;
    let mutated = modelio::from_bytes(&bytes).unwrap();
    assert!(!modelio::verify_equivalence(&float, &mutated, 4).unwrap());

}

#[test]
fn set_pad_bit_is_rejected_on_load() {
    // K = 4 leaves 60 pad bits in each row word; they must stay 0
    let mut bytes = TINY_PACKED.to_vec();
    let off = packed_payload_offset(&bytes, &tensor_name(1, "weight"), 2);
    assert_eq!(bytes[off], 0b0101);
    bytes[off] |= 0x10;
    assert!(modelio::from_bytes(&bytes).is_err());
    bytes[off] = 0b0100;
    assert!(modelio::from_bytes(&bytes).is_ok());
}
