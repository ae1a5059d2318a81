use std::fs;
use std::path::Path;

use dwvit::data::*;
use dwvit::Error;
use proptest::prelude::*;

/// CIFAR-10 records where record `i` of a file has label `i % 10` and pixel
/// byte `j` equal to `(i + j) % 256`.
fn cifar_bytes(records: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(records * 3073);
    for i in 0..records {
        out.push((i % 10) as u8);
        out.extend((0..3072).map(|j| ((i + j) % 256) as u8));
    }
    out
}

fn write_split_files(dir: &Path, train_records: usize, test_records: usize) {
    for i in 1..=5 {
        fs::write(dir.join(format!("data_batch_{i}.bin")), cifar_bytes(train_records)).unwrap();
    }
    fs::write(dir.join("test_batch.bin"), cifar_bytes(test_records)).unwrap();
}

fn tiny_dataset(images: Vec<f32>, labels: Vec<usize>, channels: usize, side: usize) -> Dataset {
    Dataset {
        images,
        labels,
        channels,
        height: side,
        width: side,
        num_classes: 4,
    }
}

// ----- CIFAR-10 loader --------------------------------------------------

#[test]
fn full_size_splits_have_fifty_and_ten_thousand_records() {
    let dir = tempfile::tempdir().unwrap();
    write_split_files(dir.path(), 10_000, 10_000);
    let train = load_cifar10(dir.path(), Split::Train).unwrap();
    let test = load_cifar10(dir.path(), Split::Test).unwrap();
    assert_eq!(train.len(), 50_000);
    assert_eq!(test.len(), 10_000);
    assert_eq!(train.images.len(), 50_000 * 3072);
    assert_eq!(
        (train.channels, train.height, train.width, train.num_classes),
        (3, 32, 32, 10)
    );
    assert_eq!(train.class_counts(), vec![5000; 10]);
}

#[test]
fn record_layout_is_label_then_channel_planes() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = vec![7u8];
    rec.extend(std::iter::repeat_n(0u8, 3072));
    rec[1] = 255; // red (0, 0)
    rec[1 + 1024 + 33] = 51; // green (1, 1)
    rec[1 + 2048 + 1023] = 255; // blue (31, 31)
    for i in 1..=5 {
        fs::write(dir.path().join(format!("data_batch_{i}.bin")), &rec).unwrap();
    }
    let d = load_cifar10(dir.path(), Split::Train).unwrap();
    assert_eq!(d.len(), 5);
    assert_eq!(d.labels[0], 7);
    let img = d.image(0);
    assert_eq!(img[0], 1.0);
    assert_eq!(img[1], 0.0);
    assert!((img[1024 + 33] - 0.2).abs() < 1e-7);
    assert_eq!(img[2048 + 1023], 1.0);
    assert_eq!(img.iter().filter(|&&v| v != 0.0).count(), 3);
}

#[test]
fn pixel_values_are_bytes_over_255() {
    let dir = tempfile::tempdir().unwrap();
    write_split_files(dir.path(), 3, 2);
    let d = load_cifar10(dir.path(), Split::Test).unwrap();
    for i in 0..2 {
        assert_eq!(d.labels[i], i);
        for (j, &v) in d.image(i).iter().enumerate() {
            assert_eq!(v, ((i + j) % 256) as f32 / 255.0);
        }
    }
}

#[test]
fn nested_batch_directory_is_found() {
    let dir = tempfile::tempdir().unwrap();
    let nested = dir.path().join("cifar-10-batches-bin");
    fs::create_dir(&nested).unwrap();
    write_split_files(&nested, 2, 2);
    assert_eq!(load_cifar10(dir.path(), Split::Train).unwrap().len(), 10);
}

#[test]
fn truncated_file_is_a_format_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_split_files(dir.path(), 2, 2);
    let mut bytes = cifar_bytes(2);
    bytes.pop();
    fs::write(dir.path().join("test_batch.bin"), bytes).unwrap();
    match load_cifar10(dir.path(), Split::Test) {
        Err(Error::Format { path, reason }) => {
            assert!(path.ends_with("test_batch.bin"));
            assert!(reason.contains("6145"), "{reason}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn empty_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("test_batch.bin"), []).unwrap();
    assert!(matches!(
        load_cifar10(dir.path(), Split::Test),
        Err(Error::Format { .. })
    ));
}

#[test]
fn label_out_of_range_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = cifar_bytes(3);
    bytes[2 * 3073] = 10;
    fs::write(dir.path().join("test_batch.bin"), bytes).unwrap();
    match load_cifar10(dir.path(), Split::Test) {
        Err(Error::Format { reason, .. }) => assert!(reason.contains("record 2"), "{reason}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_cifar10(dir.path(), Split::Train), Err(Error::Io(_))));
}

#[test]
fn written_records_load_back_quantized() {
    let dir = tempfile::tempdir().unwrap();
    let d = synthetic_dataset(30, 10, 5);
    write_cifar10_records(&dir.path().join("test_batch.bin"), &d).unwrap();
    let back = load_cifar10(dir.path(), Split::Test).unwrap();
    assert_eq!(back.labels, d.labels);
    for (a, b) in d.images.iter().zip(&back.images) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn writing_rejects_non_cifar_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let d = synthetic_dataset_sized(4, 2, 8, 0);
    assert!(matches!(
        write_cifar10_records(&dir.path().join("x.bin"), &d),
        Err(Error::Config { .. })
    ));
}

// ----- synthetic data ---------------------------------------------------

/// Classifies by the stamp that matches the image best, independently of
/// the generator.
fn nearest_pattern(image: &[f32], side: usize, patterns: &[ClassPattern]) -> usize {
    let mismatch = |p: &ClassPattern| {
        let mut err = 0.0f32;
        for c in 0..3 {
            for dy in 0..STAMP {
                for dx in 0..STAMP {
                    let v = image[(c * side + p.y + dy) * side + p.x + dx];
                    err += (v - p.pixels[(c * STAMP + dy) * STAMP + dx]).abs();
                }
            }
        }
        err
    };
    (0..patterns.len())
        .min_by(|&a, &b| mismatch(&patterns[a]).total_cmp(&mismatch(&patterns[b])))
        .unwrap()
}

#[test]
fn synthetic_draws_are_deterministic() {
    assert_eq!(synthetic_dataset(50, 10, 3), synthetic_dataset(50, 10, 3));
    assert_ne!(synthetic_dataset(50, 10, 3).images, synthetic_dataset(50, 10, 4).images);
}

#[test]
fn synthetic_classes_are_balanced() {
    let d = synthetic_dataset(2000, 10, 1);
    assert_eq!(d.class_counts(), vec![200; 10]);
    let d = synthetic_dataset(23, 10, 1);
    assert_eq!(d.class_counts(), vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
}

#[test]
fn synthetic_pixels_lie_in_unit_interval() {
    let d = synthetic_dataset(20, 10, 9);
    assert!(d.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!((d.channels, d.height, d.width), (3, 32, 32));
}

#[test]
fn class_patterns_are_disjoint_distinct_and_seed_free() {
    for (classes, side) in [(10, 32), (4, 8), (3, 9), (64, 32)] {
        let ps = class_patterns(classes, side);
        assert_eq!(ps.len(), classes);
        for (i, a) in ps.iter().enumerate() {
            assert!(a.y + STAMP <= side && a.x + STAMP <= side);
            assert!(a.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
            for b in &ps[i + 1..] {
                let apart = a.y + STAMP <= b.y || b.y + STAMP <= a.y || a.x + STAMP <= b.x || b.x + STAMP <= a.x;
                assert!(apart, "{classes} classes on {side}: overlap");
                assert_ne!(a.pixels, b.pixels);
            }
        }
        assert_eq!(ps, class_patterns(classes, side));
    }
}

#[test]
#[should_panic(expected = "do not fit")]
fn too_many_classes_for_the_image_panics() {
    class_patterns(5, 8);
}

#[test]
fn nearest_pattern_oracle_labels_every_image() {
    for (side, classes, seed) in [(32, 10, 0), (32, 10, 17), (8, 4, 3)] {
        let d = synthetic_dataset_sized(300, classes, side, seed);
        let ps = class_patterns(d.num_classes, side);
        for i in 0..d.len() {
            assert_eq!(nearest_pattern(d.image(i), side, &ps), d.labels[i], "image {i}");
        }
    }
}

#[test]
fn prepared_synthetic_splits_share_patterns_but_not_pixels() {
    let p = DatasetSpec::synthetic(100, 40, 10, 2).prepare().unwrap();
    assert_eq!((p.train.len(), p.val.len()), (100, 40));
    assert_ne!(p.train.image(0), p.val.image(0));
    let ps = class_patterns(10, 32);
    for i in 0..p.val.len() {
        assert_eq!(nearest_pattern(p.val.image(i), 32, &ps), p.val.labels[i]);
    }
    assert_eq!(p.stats, ChannelStats::compute(&p.train));
    assert!(p.source.contains("synthetic"));
}

// ----- normalization ----------------------------------------------------

#[test]
fn channel_stats_are_population_moments() {
    // two 2-channel 1×2 images
    let d = tiny_dataset(vec![0.0, 1.0, 0.5, 0.5, 1.0, 1.0, 0.25, 0.75], vec![0, 1], 2, 1);
    let d = Dataset { width: 2, ..d };
    let s = ChannelStats::compute(&d);
    // channel 0: 0, 1, 1, 1 -> mean 0.75, var 0.1875
    // channel 1: 0.5, 0.5, 0.25, 0.75 -> mean 0.5, var 0.03125
    assert!((s.mean[0] - 0.75).abs() < 1e-7 && (s.mean[1] - 0.5).abs() < 1e-7);
    assert!((s.std[0] - 0.1875f32.sqrt()).abs() < 1e-6);
    assert!((s.std[1] - 0.03125f32.sqrt()).abs() < 1e-6);
}

#[test]
fn normalized_data_has_zero_mean_unit_std() {
    let mut d = synthetic_dataset(64, 10, 8);
    let s = ChannelStats::compute(&d);
    let n = d.image_len();
    for img in d.images.chunks_exact_mut(n) {
        s.normalize(img);
    }
    let t = ChannelStats::compute(&d);
    for c in 0..3 {
        assert!(t.mean[c].abs() < 1e-4, "{:?}", t.mean);
        assert!((t.std[c] - 1.0).abs() < 1e-4, "{:?}", t.std);
    }
}

#[test]
fn invalid_stats_are_rejected() {
    assert!(ChannelStats::identity(3).validate(3).is_ok());
    assert!(ChannelStats::identity(2).validate(3).is_err());
    let zero = ChannelStats {
        mean: vec![0.0; 3],
        std: vec![1.0, 0.0, 1.0],
    };
    assert!(matches!(zero.validate(3), Err(Error::Config { field, .. }) if field == "normalization.std"));
}

proptest! {
    #[test]
    fn denormalize_inverts_normalize(
        img in proptest::collection::vec(0.0f32..1.0, 3 * 16),
        mean in proptest::collection::vec(-1.0f32..1.0, 3),
        std in proptest::collection::vec(0.05f32..3.0, 3),
    ) {
        let s = ChannelStats { mean, std };
        let mut x = img.clone();
        s.normalize(&mut x);
        s.denormalize(&mut x);
        for (a, b) in x.iter().zip(&img) {
            prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn hflip_is_an_involution(img in proptest::collection::vec(-5.0f32..5.0, 2 * 3 * 5)) {
        let mut x = img.clone();
        hflip(&mut x, 5);
        hflip(&mut x, 5);
        prop_assert_eq!(x, img);
    }

    #[test]
    fn shuffled_epochs_preserve_the_label_multiset(n in 1usize..60, bs in 1usize..17, seed: u64) {
        let d = synthetic_dataset_sized(n, 7, 16, 1);
        let id = ChannelStats::identity(3);
        let mut seen: Vec<usize> = batches(&d, bs, Some(seed), Augmentation::None, &id)
            .unwrap()
            .flat_map(|b| b.labels)
            .collect();
        let mut expected = d.labels.clone();
        seen.sort_unstable();
        expected.sort_unstable();
        prop_assert_eq!(seen, expected);
    }

    #[test]
    fn centred_crop_is_identity(img in proptest::collection::vec(0.0f32..1.0, 3 * 6 * 6)) {
        prop_assert_eq!(pad_crop(&img, 3, 6, 6, 4, 4, 4), img);
    }
}

// ----- augmentation -----------------------------------------------------

#[test]
fn hflip_mirrors_rows() {
    let mut x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    hflip(&mut x, 3);
    assert_eq!(x, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
}

#[test]
fn pad_crop_shifts_with_a_zero_border() {
    // one channel 3×3: values 1..=9
    let img: Vec<f32> = (1..=9).map(|v| v as f32).collect();
    // reading padded (y + 2, x + 2) with pad 1 shifts content up-left by one
    assert_eq!(
        pad_crop(&img, 1, 3, 3, 1, 2, 2),
        vec![5.0, 6.0, 0.0, 8.0, 9.0, 0.0, 0.0, 0.0, 0.0]
    );
    assert_eq!(
        pad_crop(&img, 1, 3, 3, 1, 0, 1),
        vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    );
    assert_eq!(pad_crop(&img, 1, 3, 3, 4, 0, 0), vec![0.0; 9]);
}

#[test]
fn augmented_batches_are_reproducible_and_bounded() {
    let d = synthetic_dataset_sized(12, 4, 8, 2);
    let id = ChannelStats::identity(3);
    let a: Vec<Batch> = batches(&d, 5, Some(9), Augmentation::FlipCrop, &id).unwrap().collect();
    let b: Vec<Batch> = batches(&d, 5, Some(9), Augmentation::FlipCrop, &id).unwrap().collect();
    assert_eq!(a, b);
    let plain: Vec<Batch> = batches(&d, 5, Some(9), Augmentation::None, &id).unwrap().collect();
    assert_ne!(a, plain);
    for (x, y) in a.iter().zip(&plain) {
        assert_eq!(x.labels, y.labels);
        // every augmented value is zero padding or a source pixel of the same image
        for (ai, pi) in x
            .images
            .data()
            .chunks(d.image_len())
            .zip(y.images.data().chunks(d.image_len()))
        {
            assert!(ai.iter().all(|v| *v == 0.0 || pi.contains(v)));
        }
    }
}

// ----- batching ---------------------------------------------------------

#[test]
fn ten_samples_in_batches_of_four() {
    let d = synthetic_dataset_sized(10, 4, 8, 0);
    let id = ChannelStats::identity(3);
    let it = batches(&d, 4, None, Augmentation::None, &id).unwrap();
    assert_eq!(it.num_batches(), 3);
    let all: Vec<Batch> = it.collect();
    let sizes: Vec<usize> = all.iter().map(|b| b.labels.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    assert_eq!(all[2].images.shape(), &[2, 3, 8, 8]);
    // unshuffled batches follow dataset order
    let labels: Vec<usize> = all.iter().flat_map(|b| b.labels.clone()).collect();
    assert_eq!(labels, d.labels);
    assert_eq!(all[1].images.data()[..d.image_len()], *d.image(4));
}

#[test]
fn shuffle_is_fixed_by_the_seed() {
    let d = synthetic_dataset_sized(40, 10, 16, 0);
    let id = ChannelStats::identity(3);
    let order = |seed| -> Vec<Batch> { batches(&d, 8, Some(seed), Augmentation::None, &id).unwrap().collect() };
    assert_eq!(order(5), order(5));
    assert_ne!(order(5), order(6));
    let unshuffled: Vec<usize> = batches(&d, 40, None, Augmentation::None, &id)
        .unwrap()
        .next()
        .unwrap()
        .labels;
    assert_ne!(order(5)[0].labels, unshuffled[..8].to_vec());
}

#[test]
fn batches_are_normalized_with_the_given_stats() {
    let d = synthetic_dataset_sized(3, 2, 8, 0);
    let s = ChannelStats {
        mean: vec![0.5, 0.25, 0.0],
        std: vec![0.5, 2.0, 1.0],
    };
    let b = batches(&d, 3, None, Augmentation::None, &s).unwrap().next().unwrap();
    let hw = 64;
    for (k, (&got, &raw)) in b.images.data().iter().zip(&d.images).enumerate() {
        let c = (k / hw) % 3;
        let expected = (raw - s.mean[c]) / s.std[c];
        assert!((got - expected).abs() < 1e-6);
    }
}

#[test]
fn zero_batch_size_is_a_config_error() {
    let d = synthetic_dataset_sized(3, 2, 8, 0);
    let id = ChannelStats::identity(3);
    assert!(matches!(
        batches(&d, 0, None, Augmentation::None, &id),
        Err(Error::Config { field, .. }) if field == "batch_size"
    ));
    assert!(batches(&d, 2, None, Augmentation::None, &ChannelStats::identity(1)).is_err());
}

#[test]
fn prefetch_preserves_order_and_stops_on_error() {
    let d = synthetic_dataset_sized(20, 4, 8, 0);
    let id = ChannelStats::identity(3);
    let direct: Vec<Batch> = batches(&d, 3, Some(1), Augmentation::FlipCrop, &id).unwrap().collect();
    let mut fetched = Vec::new();
    prefetch(batches(&d, 3, Some(1), Augmentation::FlipCrop, &id).unwrap(), 2, |b| {
        fetched.push(b);
        Ok::<_, ()>(())
    })
    .unwrap();
    assert_eq!(fetched, direct);
    let mut count = 0;
    let r = prefetch(batches(&d, 3, None, Augmentation::None, &id).unwrap(), 1, |_| {
        count += 1;
        if count == 2 {
            Err("stop")
        } else {
            Ok(())
        }
    });
    assert_eq!(r, Err("stop"));
    assert_eq!(count, 2);
}

// ----- dataset specs ----------------------------------------------------

#[test]
fn subset_takes_a_prefix() {
    let d = synthetic_dataset_sized(10, 4, 8, 0);
    let s = d.subset(4).unwrap();
    assert_eq!(s.labels, d.labels[..4]);
    assert_eq!(s.image(3), d.image(3));
    assert!(matches!(d.subset(11), Err(Error::Config { .. })));
    let sample = d.sample(2);
    assert_eq!(sample.image.shape(), &[3, 8, 8]);
    assert_eq!(sample.label, d.labels[2]);
}

#[test]
fn cifar_spec_subsets_after_computing_full_split_stats() {
    let dir = tempfile::tempdir().unwrap();
    write_split_files(dir.path(), 8, 6);
    // brighter records beyond the subset shift the full-split mean
    let mut bright = cifar_bytes(8);
    bright
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| i % 3073 != 0)
        .for_each(|(_, b)| *b = 255);
    fs::write(dir.path().join("data_batch_5.bin"), bright).unwrap();
    let mut spec = DatasetSpec::cifar10(dir.path());
    spec.train_size = Some(5);
    spec.val_size = Some(4);
    let p = spec.prepare().unwrap();
    assert_eq!((p.train.len(), p.val.len()), (5, 4));
    let full = load_cifar10(dir.path(), Split::Train).unwrap();
    assert_eq!(p.stats, ChannelStats::compute(&full));
    assert_ne!(p.stats, ChannelStats::compute(&p.train));

    spec.train_size = Some(41);
    assert!(matches!(spec.prepare(), Err(Error::Config { .. })));
}

#[test]
fn explicit_normalization_overrides_computed_stats() {
    let mut spec = DatasetSpec::synthetic(10, 4, 10, 0);
    spec.normalization = Some(ChannelStats::identity(3));
    assert_eq!(spec.prepare().unwrap().stats, ChannelStats::identity(3));
    spec.normalization = Some(ChannelStats::identity(2));
    assert!(spec.prepare().is_err());
}

#[test]
fn cifar_spec_without_root_is_a_config_error() {
    let mut spec = DatasetSpec::cifar10("x");
    spec.root = None;
    assert!(matches!(spec.prepare(), Err(Error::Config { field, .. }) if field == "data.root"));
}

#[test]
fn dataset_spec_parses_from_toml() {
    let spec: DatasetSpec = toml::from_str(
        r#"
kind = "synthetic"
train_size = 64
val_size = 16
num_classes = 5
augmentation = "flip_crop"
seed = 3
"#,
    )
    .unwrap();
    assert_eq!(spec.kind, DatasetKind::Synthetic);
    assert_eq!(spec.augmentation, Augmentation::FlipCrop);
    assert_eq!(spec.num_classes, 5);
    assert!(toml::from_str::<DatasetSpec>("kind = \"synthetic\"\nbogus = 1\n").is_err());
    let cifar: DatasetSpec = toml::from_str("kind = \"cifar10_binary\"\nroot = \"/data\"\n").unwrap();
    assert_eq!(cifar.num_classes, 10);
    assert_eq!(cifar.augmentation, Augmentation::None);
}
