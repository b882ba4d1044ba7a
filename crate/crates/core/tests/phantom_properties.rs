use std::path::Path;

use tape_core::synthdata::{
    column_transitions, decode_sample, encode_sample, gen_dataset, gen_phantom, sample_file_len, Dataset, DatasetSpec,
    Pathology, Split, NUM_CLASSES,
};
use tape_core::Error;

#[test]
fn boundaries_stay_ordered_for_ten_thousand_seeds() {
    let (h, w) = (32, 32);
    for seed in 0..10_000u64 {
        let p = Pathology::ALL[(seed % 4) as usize];
        let s = gen_phantom(seed, p, h, w).unwrap();
        assert!(s.labels.iter().all(|&l| (l as usize) < NUM_CLASSES));
        for x in 0..w {
            let classes: Vec<u8> = column_transitions(&s.labels, h, w, x).iter().map(|&(_, c)| c).collect();
            assert_eq!(classes, [1, 2, 3, 4, 5, 6], "seed {seed}, {p}, column {x}");
        }
        assert!(s
            .oct
            .data()
            .iter()
            .chain(s.octa.data())
            .all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn container_size_follows_the_layout() {
    let s = gen_phantom(3, Pathology::Dr, 64, 64).unwrap();
    let bytes = encode_sample(&s);
    assert_eq!(bytes.len(), sample_file_len(64, 64));
    assert_eq!(&bytes[..8], b"TAPEIMG1");
    assert_eq!(decode_sample(&bytes, Path::new("s")).unwrap(), s);

    let mut wrong = bytes.clone();
    wrong[3] = b'?';
    assert!(matches!(
        decode_sample(&wrong, Path::new("s")),
        Err(Error::Format { .. })
    ));
    assert!(decode_sample(&bytes[..bytes.len() - 1], Path::new("s")).is_err());
}

#[test]
fn dataset_on_disk_is_stratified_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let spec = DatasetSpec::new(10, 5);
    let fa = gen_dataset(&a, &spec).unwrap();
    let fb = gen_dataset(&b, &spec).unwrap();
    assert_eq!(fa, fb);

    let ds = Dataset::open(&a).unwrap();
    assert_eq!(ds.fingerprint, fa);
    assert_eq!(ds.samples().len(), 40);
    for (split, per_class) in [(Split::Train, 7), (Split::Val, 1), (Split::Test, 2)] {
        let samples = ds.split(split);
        for p in Pathology::ALL {
            assert_eq!(
                samples.iter().filter(|s| s.pathology == p).count(),
                per_class,
                "{split:?} {p}"
            );
        }
    }

    let other = gen_dataset(&tmp.path().join("c"), &DatasetSpec::new(10, 6)).unwrap();
    assert_ne!(other, fa);
}
