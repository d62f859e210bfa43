use bnrank::datasets::{generate, load_idx, write_idx, DatasetSpec};
use bnrank::init::RngHandle;
use bnrank::{Error, Matrix};

/// Fits `w` minimizing ‖[x; 1]ᵀ w − t‖² with targets ±1 and classifies by sign.
fn least_squares_accuracy(x: &Matrix, labels: &[usize]) -> f64 {
    let n = x.ncols();
    let a = Matrix::from_fn(n, x.nrows() + 1, |i, j| if j < x.nrows() { x[(j, i)] } else { 1.0 });
    let t = nalgebra::DVector::from_iterator(n, labels.iter().map(|&y| if y == 0 { 1.0 } else { -1.0 }));
    let w = a.clone().svd(true, true).solve(&t, 1e-12).unwrap();
    let pred = a * w;
    let hits = pred
        .iter()
        .zip(labels)
        .filter(|(p, &y)| (**p > 0.0) == (y == 0))
        .count();
    hits as f64 / n as f64
}

#[test]
fn separated_blobs_are_linearly_classifiable() {
    let spec = DatasetSpec::gaussian_blobs(8, 1000, 2, 6.0);
    let data = generate(&spec, &mut RngHandle::new(5, 0)).unwrap();
    let acc = least_squares_accuracy(&data.x, data.labels.as_ref().unwrap());
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn idx_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    let mut rng = RngHandle::new(6, 0);
    let x = Matrix::from_fn(12, 5, |_, _| rng.below(256) as f64 / 255.0);
    let labels = vec![3, 1, 4, 1, 5];
    write_idx(&img, &lab, &x, 3, 4, &labels).unwrap();
    let (back, back_labels) = load_idx(&img, &lab).unwrap();
    assert_eq!(back, x);
    assert_eq!(back_labels, labels);

    let spec = DatasetSpec::idx_files(&img, &lab);
    let data = generate(&spec, &mut RngHandle::new(0, 0)).unwrap();
    assert_eq!(data.x, x);
}

#[test]
fn idx_count_mismatch_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    write_idx(&img, &lab, &Matrix::zeros(4, 3), 2, 2, &[0, 1]).unwrap();
    assert!(matches!(load_idx(&img, &lab), Err(Error::Format { offset: 4, .. })));
}

#[test]
fn swapped_idx_files_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    write_idx(&img, &lab, &Matrix::zeros(4, 2), 2, 2, &[0, 1]).unwrap();
    assert!(matches!(load_idx(&lab, &img), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert!(matches!(load_idx(&missing, &missing), Err(Error::Io(_))));
}
