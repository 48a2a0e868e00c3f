//! Toy generator and chip-folder loading.

use crgan::data::{load_chip_dataset, save_dataset, toy, write_gray, Split, CLASS_LIST};

/// Normalized cross-correlation, computed independently of the crate.
fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    num / (va * vb).sqrt()
}

#[test]
fn toy_class_means_are_pairwise_distinguishable() {
    let ds = toy::make_toy_dataset(10, 20, 32, 0).unwrap();
    assert_eq!(ds.chips.len(), 200);
    let mut means = vec![vec![0.0f64; 32 * 32]; 10];
    for c in &ds.chips {
        for (m, &p) in means[c.label].iter_mut().zip(&c.pixels) {
            *m += p as f64 / 20.0;
        }
    }
    let mut worst = f64::NEG_INFINITY;
    for i in 0..10 {
        for j in i + 1..10 {
            worst = worst.max(ncc(&means[i], &means[j]));
        }
    }
    assert!(worst < 0.9, "max class-mean NCC {worst}");
}

#[test]
fn toy_generation_is_seeded() {
    let a = toy::make_toy_dataset(3, 4, 16, 9).unwrap();
    assert_eq!(a, toy::make_toy_dataset(3, 4, 16, 9).unwrap());
    assert_ne!(a, toy::make_toy_dataset(3, 4, 16, 10).unwrap());
}

#[test]
fn empty_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_chip_dataset(dir.path(), 16).is_err());
    assert!(load_chip_dataset(&dir.path().join("missing"), 16).is_err());
}

#[test]
fn empty_class_folder_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("a")).unwrap();
    write_gray(&dir.path().join("a/x.png"), &[0.0; 16], 4).unwrap();
    std::fs::create_dir(dir.path().join("b")).unwrap();
    assert!(load_chip_dataset(dir.path(), 4).is_err());
}

#[test]
fn ten_classes_of_three_files_load_in_stable_order() {
    let dir = tempfile::tempdir().unwrap();
    for c in 0..10 {
        let class = dir.path().join(format!("class_{c}"));
        std::fs::create_dir(&class).unwrap();
        for f in 0..3 {
            let px: Vec<f32> = (0..64).map(|i| ((i + c * 7 + f * 3) % 11) as f32 / 5.0 - 1.0).collect();
            write_gray(&class.join(format!("chip_{f}.png")), &px, 8).unwrap();
        }
    }
    std::fs::write(dir.path().join("class_0/notes.txt"), "not an image").unwrap();
    std::fs::write(dir.path().join("class_1/broken.png"), "not a png").unwrap();

    let ds = load_chip_dataset(dir.path(), 8).unwrap();
    assert_eq!(ds.chips.len(), 30);
    assert_eq!(ds.num_classes(), 10);
    let labels: Vec<usize> = ds.chips.iter().map(|c| c.label).collect();
    let expected: Vec<usize> = (0..10).flat_map(|c| [c; 3]).collect();
    assert_eq!(labels, expected);
    assert!(ds.chips.iter().all(|c| c.split == Split::Train));
    assert_eq!(ds, load_chip_dataset(dir.path(), 8).unwrap());
}

#[test]
fn saved_dataset_reloads_with_splits() {
    let ds = toy::make_toy_split(4, 3, 2, 16, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_chip_dataset(dir.path(), 16).unwrap();
    assert_eq!(back.class_names, ds.class_names);
    assert_eq!(back.split(Split::Train).len(), 12);
    assert_eq!(back.split(Split::Test).len(), 8);
    assert!(dir.path().join(CLASS_LIST).is_file());
    for a in &ds.chips {
        let b = back
            .chips
            .iter()
            .find(|b| b.source == format!("{}/{}.png", ds.class_names[a.label], a.source))
            .unwrap();
        assert_eq!((a.label, a.split), (b.label, b.split));
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() <= 2.0 / 255.0 + 1e-6);
        }
    }
}
