use std::collections::BTreeMap;

use robustdistill::nn::{build_model, Checkpoint, Layer, ModelSpec, ParameterSet, Role, Selection, TeacherSize};
use robustdistill::tensor::{Tape, Tensor};
use robustdistill::train::EpochRecord;
use robustdistill::Error;

#[test]
fn build_is_deterministic_per_seed() {
    let spec = ModelSpec::student_cnn([1, 8, 8], 5);
    assert_eq!(build_model(&spec, 3).unwrap(), build_model(&spec, 3).unwrap());
    assert_ne!(build_model(&spec, 3).unwrap(), build_model(&spec, 4).unwrap());
}

#[test]
fn mlp_parameter_count() {
    let p = build_model(&ModelSpec::mlp(784, &[100], 10), 0).unwrap();
    // 78,400 + 100 + 1,000 + 10
    assert_eq!(p.num_parameters(), 784 * 100 + 100 + 100 * 10 + 10);
    assert_eq!(p.num_parameters(), 79_510);
}

#[test]
fn non_composing_spec_is_a_shape_error() {
    let spec = ModelSpec {
        input_shape: vec![10],
        layers: vec![Layer::Dense { inputs: 10, outputs: 5 }, Layer::Dense { inputs: 6, outputs: 2 }],
        num_classes: 2,
    };
    assert!(matches!(build_model(&spec, 0), Err(Error::Shape(_))));
    let wrong_classes = ModelSpec::mlp(4, &[3], 2);
    let mut spec = wrong_classes.clone();
    spec.num_classes = 3;
    assert!(matches!(spec.validate(), Err(Error::Shape(_))));
}

#[test]
fn zero_parameters_give_uniform_predictions() {
    let spec = ModelSpec::mlp(6, &[4], 10);
    let p = ParameterSet::<f32>::zeros(&spec).unwrap();
    let x = Tensor::full(vec![3, 6], 0.7f32);
    assert!(p.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(p.predict_probs(&x, 1.0).unwrap().data().iter().all(|&v| (v - 0.1).abs() < 1e-7));
}

#[test]
fn duplicated_rows_give_duplicated_logits() {
    let p = build_model(&ModelSpec::teacher_cnn([1, 8, 8], 4, TeacherSize::Small), 1).unwrap();
    let row: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin().abs()).collect();
    let x = Tensor::new(vec![3, 1, 8, 8], [row.clone(), row.clone(), row].concat()).unwrap();
    let z = p.logits(&x).unwrap();
    assert_eq!(z.row(0), z.row(1));
    assert_eq!(z.row(0), z.row(2));
}

#[test]
fn single_dense_layer_is_affine() {
    let spec = ModelSpec {
        input_shape: vec![2],
        layers: vec![Layer::Dense { inputs: 2, outputs: 3 }],
        num_classes: 3,
    };
    let mut p = ParameterSet::<f64>::zeros(&spec).unwrap();
    p.set("0.weight", Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
    p.set("0.bias", Tensor::new(vec![3], vec![0.5, -0.5, 1.0]).unwrap()).unwrap();
    let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    // [1, 2] . [[1, 2, 3], [4, 5, 6]] = [9, 12, 15]
    assert_eq!(p.logits(&x).unwrap().data(), &[9.5, 11.5, 16.0]);
    assert!(p.set("0.bias", Tensor::zeros(vec![2])).is_err());
}

#[test]
fn temperature_softens_predictions() {
    let spec = ModelSpec {
        input_shape: vec![1],
        layers: vec![Layer::Dense { inputs: 1, outputs: 2 }],
        num_classes: 2,
    };
    let mut p = ParameterSet::<f64>::zeros(&spec).unwrap();
    p.set("0.weight", Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap()).unwrap();
    let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let probs = p.predict_probs(&x, 2.0).unwrap();
    let e = std::f64::consts::E;
    assert!((probs.data()[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((probs.data()[0] - 0.73106).abs() < 1e-5);
    assert!((probs.data()[1] - 0.26894).abs() < 1e-5);
    let hot = p.predict_probs(&x, 1e6).unwrap();
    assert!((hot.data()[0] - hot.data()[1]).abs() < 1e-3);
    assert!(p.predict_probs(&x, 0.0).is_err());
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let p = build_model(&ModelSpec::mlp(4, &[3], 2), 0).unwrap();
    let tape = Tape::new();
    let m = p.bind(&tape, false);
    assert!(m.forward_tensor(&Tensor::zeros(vec![2, 5])).is_err());
}

fn sample_checkpoint() -> Checkpoint {
    let params = build_model(&ModelSpec::student_cnn([1, 8, 8], 5), 11).unwrap();
    let momentum: BTreeMap<String, Tensor<f32>> = params
        .tensors()
        .iter()
        .map(|(k, v)| (k.clone(), v.map(|x| x * 0.5 - 1e-30)))
        .collect();
    let history = vec![EpochRecord {
        epoch: 1,
        lr: 0.1,
        train_loss: 1.25,
        train_acc: 0.5,
        val_clean_acc: 0.625,
        val_robust_acc: 0.125,
        wall_ms: 17,
    }];
    Checkpoint {
        params,
        epoch: 1,
        momentum,
        history,
        selection: Selection::Best,
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = sample_checkpoint();
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    for (k, t) in ckpt.params.tensors() {
        let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.params.get(k).unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    let teacher = Checkpoint::from_params(ckpt.params.clone().with_role(Role::Teacher), Selection::Last);
    teacher.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().params.role(), Role::Teacher);
}

#[test]
fn corrupted_magic_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut bytes = sample_checkpoint().to_bytes();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
}

#[test]
fn truncation_and_bit_flips_are_integrity_errors() {
    let bytes = sample_checkpoint().to_bytes();
    let p = std::path::Path::new("mem");
    for cut in [10, 30, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], p), Err(Error::Integrity { .. })), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped, p), Err(Error::Integrity { .. })));
}

#[test]
fn spec_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    sample_checkpoint().save(&path).unwrap();
    let other = ModelSpec::student_cnn([1, 8, 8], 4);
    assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(Error::SpecMismatch { .. })));
    assert!(Checkpoint::load_expecting(&path, &ModelSpec::student_cnn([1, 8, 8], 5)).is_ok());
}

#[test]
fn teacher_sizes_are_ordered() {
    let sizes = [TeacherSize::Small, TeacherSize::Medium, TeacherSize::Large];
    let counts: Vec<usize> = sizes
        .iter()
        .map(|&s| build_model(&ModelSpec::teacher_cnn([1, 8, 8], 5, s), 0).unwrap().num_parameters())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    let student = build_model(&ModelSpec::student_cnn([1, 8, 8], 5), 0).unwrap().num_parameters();
    assert!(student < counts[2]);
}
