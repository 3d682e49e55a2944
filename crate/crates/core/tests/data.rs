use std::path::Path;

use pgcr::data::{
    center_crop, gen_synthetic_dataset, load_dataset, load_rice, random_crop, write_dataset, write_image, CloudRange,
    DatasetSplit, RiceVariant,
};
use pgcr::metrics::ImageU8;

fn mock_rice(root: &Path, n: usize) {
    for dir in ["cloud", "label"] {
        std::fs::create_dir_all(root.join(dir)).unwrap();
    }
    for i in 0..n {
        let v = (i % 251) as u8;
        write_image(&root.join("cloud").join(format!("{i}.png")), &ImageU8::filled(4, 4, [v, 255, 255])).unwrap();
        write_image(&root.join("label").join(format!("{i}.png")), &ImageU8::filled(4, 4, [v, 0, 0])).unwrap();
    }
}

fn ids(split: &[pgcr::data::PairSource]) -> Vec<usize> {
    split.iter().map(|p| p.id().parse().unwrap()).collect()
}

#[test]
fn rice1_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    mock_rice(dir.path(), 500);
    let s = load_rice(dir.path(), RiceVariant::Rice1).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (320, 80, 100));
    // Numeric order, so 100 follows 99 rather than 10.
    assert_eq!(ids(&s.test), (400..500).collect::<Vec<_>>());
    assert_eq!(ids(&s.val)[..3], [0, 5, 10]);
    let pair = s.val[1].load().unwrap();
    assert_eq!(pair.clean.get(0, 0, 0), 5);
}

#[test]
fn rice2_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    mock_rice(dir.path(), 736);
    let s = load_dataset(dir.path(), Some(RiceVariant::Rice2)).unwrap();
    assert_eq!(s.test.len(), 148);
    assert_eq!(s.train.len() + s.val.len(), 588);
    assert_eq!(s.val.len(), 117);
}

#[test]
fn orphans_and_short_trees_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    mock_rice(dir.path(), 401);
    write_image(&dir.path().join("cloud/999.png"), &ImageU8::filled(4, 4, [1, 2, 3])).unwrap();
    let err = load_rice(dir.path(), RiceVariant::Rice1).unwrap_err().to_string();
    assert!(err.contains("999.png") && err.contains("no matching label"), "{err}");

    let small = tempfile::tempdir().unwrap();
    mock_rice(small.path(), 30);
    assert!(load_rice(small.path(), RiceVariant::Rice1).is_err());
    assert!(load_dataset(small.path(), None).is_err());
}

#[test]
fn synthetic_split_and_round_trip() {
    let split = gen_synthetic_dataset(50, 32, &CloudRange::default(), 3).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (32, 8, 10));
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&split, dir.path()).unwrap();
    let back = load_dataset(dir.path(), None).unwrap();
    for name in ["train", "val", "test"] {
        let a = DatasetSplit::load_all(split.split(name).unwrap()).unwrap();
        let b = DatasetSplit::load_all(back.split(name).unwrap()).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert_eq!((&p.id, &p.cloudy, &p.clean, &p.mask), (&q.id, &q.cloudy, &q.clean, &q.mask));
        }
    }
}

#[test]
fn zero_coverage_leaves_images_clean() {
    let split = gen_synthetic_dataset(10, 32, &CloudRange::fixed(0.0), 1).unwrap();
    for p in DatasetSplit::load_all(&split.train).unwrap() {
        assert_eq!(p.cloudy, p.clean);
    }
}

#[test]
fn crops() {
    let split = gen_synthetic_dataset(5, 40, &CloudRange::default(), 2).unwrap();
    let pair = DatasetSplit::load_all(&split.train).unwrap().remove(0);
    let c = center_crop(&pair, 32).unwrap();
    assert_eq!(c.cloudy, pair.cloudy.crop(4, 4, 32, 32).unwrap());
    let r = random_crop(&pair, 32, 9).unwrap();
    assert_eq!(r, random_crop(&pair, 32, 9).unwrap());
    assert!(center_crop(&pair, 41).is_err());
}
