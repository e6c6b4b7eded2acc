//! Dataset readers and stream builders against independent references.

use std::path::{Path, PathBuf};

use frcl_bench::idx::{load_idx_raw, load_mnist, IMAGES_MAGIC, LABELS_MAGIC};
use frcl_bench::streams::{blob_centres, make_blobs, Part};
use frcl_bench::BenchError;

fn write_idx(dir: &Path, name: &str, header: &[u32], body: &[u8]) -> PathBuf {
    let mut b: Vec<u8> = header.iter().flat_map(|v| v.to_be_bytes()).collect();
    b.extend_from_slice(body);
    let path = dir.join(name);
    std::fs::write(&path, b).unwrap();
    path
}

#[test]
fn idx_files_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let images = write_idx(d, "img", &[IMAGES_MAGIC, 3, 2, 2], &[7; 12]);
    let labels = write_idx(d, "lab", &[LABELS_MAGIC, 3], &[0, 1, 2]);
    let raw = load_idx_raw(&images, &labels).unwrap();
    assert_eq!((raw.len(), raw.width), (3, 4));

    // a labels magic on an otherwise well-formed images file
    let wrong = write_idx(d, "wrong", &[LABELS_MAGIC, 3, 2, 2], &[7; 12]);
    let err = load_idx_raw(&wrong, &labels).unwrap_err();
    assert!(matches!(err, BenchError::BadMagic { found: LABELS_MAGIC, .. }), "{err}");

    let short = write_idx(d, "short", &[IMAGES_MAGIC, 3, 2, 2], &[7; 11]);
    let err = load_idx_raw(&short, &labels).unwrap_err();
    assert!(matches!(err, BenchError::TruncatedFile { len: 27, needed: 28, .. }), "{err}");
    let stub = write_idx(d, "stub", &[IMAGES_MAGIC], &[]);
    assert!(matches!(load_idx_raw(&stub, &labels), Err(BenchError::TruncatedFile { .. })));

    let two = write_idx(d, "two", &[LABELS_MAGIC, 2], &[0, 1]);
    let err = load_idx_raw(&images, &two).unwrap_err();
    assert!(matches!(err, BenchError::CountMismatch { images: 3, labels: 2 }), "{err}");
}

/// Published MNIST training-set class counts.
const TRAIN_COUNTS: [usize; 10] = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949];

#[test]
fn mnist_label_histogram_matches_published_counts() {
    let dir = std::env::var_os("FRCL_MNIST_DIR").map_or_else(|| PathBuf::from("/root/data/mnist"), PathBuf::from);
    if !dir.join("train-labels-idx1-ubyte").exists() {
        eprintln!("MNIST not found in {}; skipping", dir.display());
        return;
    }
    let (train, test) = load_mnist(&dir).unwrap();
    assert_eq!((train.len(), test.len(), train.width), (60000, 10000, 784));
    let mut counts = [0usize; 10];
    for &l in &train.labels {
        counts[l as usize] += 1;
    }
    assert_eq!(counts, TRAIN_COUNTS);
}

#[test]
fn blobs_are_linearly_separable() {
    // nearest true centre is a linear rule: the perpendicular bisectors
    let (tasks, classes, dims, sep, n, seed) = (4, 3, 2, 10.0, 2000, 5);
    let stream = make_blobs(tasks, classes, dims, sep, n, seed).unwrap();
    let centres = blob_centres(tasks, classes, dims, sep, seed);
    for t in 0..tasks {
        let cs = &centres[t * classes..(t + 1) * classes];
        let set = stream.part(t, Part::Test);
        let correct = (0..set.len())
            .filter(|&i| {
                let x = set.x.row(i);
                let d = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let best = (0..classes).min_by(|&a, &b| d(&cs[a]).total_cmp(&d(&cs[b]))).unwrap();
                best == set.labels[i]
            })
            .count();
        let acc = correct as f64 / set.len() as f64;
        assert!(acc >= 0.99, "task {t}: {acc}");
    }
}
