use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robustdistill::data::{
    augment, crop_at, gen_synthetic, hflip, load_cifar_binary, load_idx, shuffled_batches, write_idx, AugmentConfig,
    Dataset, IdxEncoding, Split, SyntheticConfig, SyntheticKind,
};
use robustdistill::tensor::Tensor;
use robustdistill::Error;

fn idx_bytes(kind: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, kind, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[test]
fn idx_bytes_scale_to_unit_interval() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    let pixels = [0u8, 51, 102, 255, 1, 2, 3, 254];
    fs::write(&ip, idx_bytes(0x08, &[2, 2, 2], &pixels)).unwrap();
    fs::write(&lp, idx_bytes(0x08, &[2], &[3, 1])).unwrap();
    let d = load_idx(&ip, &lp).unwrap();
    assert_eq!(d.images().shape(), &[2, 1, 2, 2]);
    let expect: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    assert_eq!(d.images().data(), &expect[..]);
    assert_eq!(d.labels(), &[3, 1]);
    assert_eq!(d.num_classes(), 4);
}

#[test]
fn idx_count_mismatch_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    fs::write(&ip, idx_bytes(0x08, &[2, 1, 1], &[1, 2])).unwrap();
    fs::write(&lp, idx_bytes(0x08, &[3], &[0, 1, 0])).unwrap();
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    fs::write(&ip, idx_bytes(0x08, &[2, 1, 1], &[1])).unwrap();
    assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
}

#[test]
fn idx_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    let cfg = SyntheticConfig {
        n: 30,
        ..SyntheticConfig::default()
    };
    let d = gen_synthetic(&cfg).unwrap();
    write_idx(&d, &ip, &lp, IdxEncoding::F32).unwrap();
    let back = load_idx(&ip, &lp).unwrap();
    assert_eq!(back.images(), d.images());
    assert_eq!(back.labels(), d.labels());
    // Byte encoding is exact for values already on the 1/255 grid.
    let grid = Dataset::new(d.images().map(|v| (v * 255.0).round() / 255.0), d.labels().to_vec(), 5, Split::Test).unwrap();
    write_idx(&grid, &ip, &lp, IdxEncoding::U8).unwrap();
    assert_eq!(load_idx(&ip, &lp).unwrap().images(), grid.images());
}

#[test]
fn cifar_single_record() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    let mut rec = vec![7u8];
    rec.extend(std::iter::repeat_n(255u8, 3072));
    fs::write(&p, &rec).unwrap();
    let d = load_cifar_binary(&[&p]).unwrap();
    assert_eq!(d.labels(), &[7]);
    assert_eq!(d.images().shape(), &[1, 3, 32, 32]);
    assert!(d.images().data().iter().all(|&v| v == 1.0));
}

#[test]
fn cifar_channel_planes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    let mut rec = vec![2u8];
    for plane in [10u8, 20, 30] {
        rec.extend(std::iter::repeat_n(plane, 1024));
    }
    fs::write(&p, &rec).unwrap();
    let d = load_cifar_binary(&[&p]).unwrap();
    let data = d.images().data();
    assert_eq!(data[0], 10.0 / 255.0);
    assert_eq!(data[1024], 20.0 / 255.0);
    assert_eq!(data[3071], 30.0 / 255.0);
}

#[test]
fn cifar_empty_file_is_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    fs::write(&p, []).unwrap();
    assert!(load_cifar_binary(&[&p]).unwrap().is_empty());
}

#[test]
fn cifar_truncated_record_names_offset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    let mut bytes = vec![1u8; 3073];
    bytes.extend([1u8; 100]);
    fs::write(&p, &bytes).unwrap();
    match load_cifar_binary(&[&p]) {
        Err(Error::Format { detail, .. }) => assert!(detail.contains("3073"), "{detail}"),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn synthetic_is_seeded_bounded_and_balanced() {
    for kind in [SyntheticKind::Gaussians, SyntheticKind::Rings] {
        let cfg = SyntheticConfig {
            kind,
            n: 503,
            ..SyntheticConfig::default()
        };
        let a = gen_synthetic(&cfg).unwrap();
        assert_eq!(a.images(), gen_synthetic(&cfg).unwrap().images());
        assert_eq!(a.len(), 503);
        assert_eq!(a.labels().len(), 503);
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.labels().iter().all(|&l| l < cfg.num_classes));
        let counts = a.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        let other = gen_synthetic(&SyntheticConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(a.images(), other.images());
    }
    assert!(gen_synthetic(&SyntheticConfig {
        num_classes: 1,
        ..SyntheticConfig::default()
    })
    .is_err());
}

#[test]
fn validation_split_is_seeded_and_disjoint() {
    let d = gen_synthetic(&SyntheticConfig {
        n: 100,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let (tr, va) = d.split_validation(0.1, 4).unwrap();
    assert_eq!((tr.len(), va.len()), (90, 10));
    assert_eq!(va.split(), Split::Validation);
    let (tr2, va2) = d.split_validation(0.1, 4).unwrap();
    assert_eq!(tr.images(), tr2.images());
    assert_eq!(va.images(), va2.images());
}

#[test]
fn batches_cover_every_index_once() {
    let b = shuffled_batches(103, 10, 9);
    assert_eq!(b.len(), 11);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..103).collect::<Vec<_>>());
}

fn image4() -> Vec<f32> {
    (0..16).map(|v| v as f32 + 1.0).collect()
}

#[test]
fn crop_windows() {
    let img = image4();
    // Offset (0, 0) into a 4-padded 12x12 image sees only padding.
    assert!(crop_at(&img, [1, 4, 4], 4, 0, 0).iter().all(|&v| v == 0.0));
    assert_eq!(crop_at(&img, [1, 4, 4], 4, 4, 4), img);
    // Offset (3, 5): output (y, x) reads source (y - 1, x + 1).
    #[rustfmt::skip]
    let expect = vec![
        0.0, 0.0, 0.0, 0.0,
        2.0, 3.0, 4.0, 0.0,
        6.0, 7.0, 8.0, 0.0,
        10.0, 11.0, 12.0, 0.0,
    ];
    assert_eq!(crop_at(&img, [1, 4, 4], 4, 3, 5), expect);
}

#[test]
fn flips_are_involutions_and_disabled_augmentation_is_identity() {
    let img = image4();
    let once = hflip(&img, [1, 4, 4]);
    assert_eq!(&once[..4], &[4.0, 3.0, 2.0, 1.0]);
    assert_eq!(hflip(&once, [1, 4, 4]), img);
    let batch = Tensor::new(vec![2, 1, 4, 4], [img.clone(), img].concat()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(&batch, &AugmentConfig::default(), &mut rng), batch);
    let always = AugmentConfig {
        pad: 0,
        crop: false,
        horizontal_flip_prob: 1.0,
    };
    let flipped = augment(&batch, &always, &mut rng);
    assert_eq!(augment(&flipped, &always, &mut rng), batch);
}
