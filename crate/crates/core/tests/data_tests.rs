use std::io::Write;

use augsearch::data::{
    encode_container, load_raw_dataset, split_half, subset, synth_rotation_task, ClassifierSpec, DatasetFormat,
    LabeledDataset, SYNTH_SIZE,
};
use augsearch::transforms::{Dims, ImageBatch};
use augsearch::Error;
use proptest::prelude::*;

fn byte_dataset(n: usize, classes: usize, d: Dims, seed: u64) -> LabeledDataset {
    let mut images = ImageBatch::new(d);
    for i in 0..n {
        let img: Vec<f64> =
            (0..d.numel()).map(|p| ((seed as usize + i * 131 + p * 17) % 256) as f64 / 255.0).collect();
        images.push(&img).unwrap();
    }
    let labels = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
    LabeledDataset::new(images, labels, classes).unwrap()
}

fn write_temp(bytes: &[u8]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(bytes).unwrap();
    f
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn container_round_trips(n in 0usize..12, classes in 1usize..5, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let ds = byte_dataset(n, classes, Dims::new(c, h, w), seed);
        let f = write_temp(&encode_container(&ds).unwrap());
        let back = load_raw_dataset(f.path(), DatasetFormat::SimpleContainer).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn truncated_containers_are_rejected(n in 1usize..6, cut in 1usize..40) {
        let ds = byte_dataset(n, 3, Dims::new(1, 3, 3), 1);
        let bytes = encode_container(&ds).unwrap();
        let cut = cut.min(bytes.len());
        let f = write_temp(&bytes[..bytes.len() - cut]);
        prop_assert!(matches!(load_raw_dataset(f.path(), DatasetFormat::SimpleContainer), Err(Error::Dataset(_))));
    }

    #[test]
    fn split_halves_are_disjoint_and_balanced(n in 2usize..60, classes in 1usize..5, seed in any::<u64>()) {
        let ds = byte_dataset(n, classes, Dims::new(1, 1, 2), 0);
        let (a, b) = split_half(&ds, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert!(a.len().abs_diff(b.len()) <= 1);
        for c in 0..classes {
            let ca = a.labels.iter().filter(|l| **l == c).count();
            let cb = b.labels.iter().filter(|l| **l == c).count();
            prop_assert!(ca.abs_diff(cb) <= 1);
        }
        let again = split_half(&ds, seed).unwrap();
        prop_assert_eq!(a, again.0);
    }

    #[test]
    fn subsets_are_class_balanced(n in 1usize..40, seed in any::<u64>()) {
        let ds = byte_dataset(60, 3, Dims::new(1, 1, 2), 0);
        let s = subset(&ds, n, seed);
        prop_assert_eq!(s.len(), n);
        let counts: Vec<usize> = (0..3).map(|c| s.labels.iter().filter(|l| **l == c).count()).collect();
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }
}

#[test]
fn cifar_records_parse() {
    let mut bytes = Vec::new();
    for (label, fill) in [(3u8, 0u8), (9, 255)] {
        bytes.push(label);
        bytes.extend(std::iter::repeat_n(fill, 3072));
    }
    let f = write_temp(&bytes);
    let ds = load_raw_dataset(f.path(), DatasetFormat::CifarBinary).unwrap();
    assert_eq!(ds.labels, vec![3, 9]);
    assert_eq!(ds.dims(), Dims::new(3, 32, 32));
    assert_eq!(ds.class_count, 10);
    assert!(ds.images.image(0).iter().all(|v| *v == 0.0));
    assert!(ds.images.image(1).iter().all(|v| *v == 1.0));

    let f = write_temp(&bytes[..3000]);
    assert!(matches!(load_raw_dataset(f.path(), DatasetFormat::CifarBinary), Err(Error::Dataset(_))));
    bytes[0] = 10;
    let f = write_temp(&bytes);
    assert!(load_raw_dataset(f.path(), DatasetFormat::CifarBinary).is_err());
}

#[test]
fn bad_inputs_give_errors() {
    let f = write_temp(b"NOPE\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0");
    assert!(matches!(load_raw_dataset(f.path(), DatasetFormat::SimpleContainer), Err(Error::Dataset(_))));
    let missing = std::path::Path::new("/nonexistent/augsearch/data.bin");
    assert!(matches!(load_raw_dataset(missing, DatasetFormat::CifarBinary), Err(Error::Io(_))));
    assert!(DatasetFormat::parse("npz").is_err());
    assert_eq!(DatasetFormat::parse("cifar-binary").unwrap(), DatasetFormat::CifarBinary);
}

#[test]
fn synthetic_task_layout() {
    let ds = synth_rotation_task(202, 3).unwrap();
    assert_eq!(ds.len(), 200);
    assert_eq!(ds.split, Some(100));
    assert_eq!(ds.dims(), Dims::new(3, SYNTH_SIZE, SYNTH_SIZE));
    assert!(ds.labels.iter().enumerate().all(|(i, l)| *l == i % 2));
    assert!(ds.images.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(ds, synth_rotation_task(202, 3).unwrap());
    assert_ne!(ds.images.data, synth_rotation_task(202, 4).unwrap().images.data);
    let (train, val) = split_half(&ds, 99).unwrap();
    assert_eq!(train.images.data, ds.images.data[..100 * ds.dims().numel()]);
    assert_eq!(val.len(), 100);
    assert!(synth_rotation_task(199, 0).is_err());
}

#[test]
fn classifier_outputs_have_the_class_count() {
    let ds = synth_rotation_task(200, 0).unwrap();
    let spec = ClassifierSpec::new(ds.dims(), 2).unwrap();
    let theta = spec.init(1);
    assert_eq!(theta.len(), spec.num_params());
    assert_eq!(theta, spec.init(1));
    let logits = spec.predict(&theta, ds.images.image(0)).unwrap();
    assert_eq!(logits.len(), 2);
    let acc = spec.accuracy(&theta, &ds).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(spec.predict(&theta, &[0.0; 5]).is_err());
}
