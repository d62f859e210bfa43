//! Synthetic inputs and the IDX image/label loader.
//!
//! Samples are columns throughout: a dataset of `n` points in `ℝ^d` is a
//! `d × n` matrix.

use std::fs;
use std::path::{Path, PathBuf};

use crate::chain::near_collinear_state;
use crate::init::RngHandle;
use crate::rank::{hard_rank, SingularSpectrum};
use crate::{Error, Matrix, Result};

/// Magic number of an IDX file of unsigned bytes with three dimensions.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Magic number of an IDX file of unsigned bytes with one dimension.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// i.i.d. standard Gaussian entries.
    GaussianMatrix,
    /// `BN(u vᵀ + ε G)`: rank one plus ε-scaled noise.
    NearCollinear,
    /// Labeled isotropic Gaussian clusters.
    GaussianBlobs,
    /// Images and labels read from IDX files.
    IdxFiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub d: usize,
    /// Number of samples (columns).
    pub n: usize,
    pub num_classes: usize,
    /// Noise level of the near-collinear construction, in `[0, 1]`.
    pub epsilon: f64,
    /// Distance between blob centers in units of the blob standard deviation.
    pub separation: f64,
    /// Enforce `hard_rank = d` on Gaussian matrices.
    pub require_full_rank: bool,
    pub images_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
}

impl DatasetSpec {
    fn base(kind: DatasetKind, d: usize, n: usize) -> Self {
        DatasetSpec {
            kind,
            d,
            n,
            num_classes: 2,
            epsilon: 0.0,
            separation: 6.0,
            require_full_rank: false,
            images_path: None,
            labels_path: None,
        }
    }

    pub fn gaussian_matrix(d: usize, n: usize) -> Self {
        Self::base(DatasetKind::GaussianMatrix, d, n)
    }

    pub fn near_collinear(d: usize, n: usize, epsilon: f64) -> Self {
        DatasetSpec {
            epsilon,
            ..Self::base(DatasetKind::NearCollinear, d, n)
        }
    }

    pub fn gaussian_blobs(d: usize, n: usize, num_classes: usize, separation: f64) -> Self {
        DatasetSpec {
            num_classes,
            separation,
            ..Self::base(DatasetKind::GaussianBlobs, d, n)
        }
    }

    pub fn idx_files(images: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        DatasetSpec {
            images_path: Some(images.into()),
            labels_path: Some(labels.into()),
            ..Self::base(DatasetKind::IdxFiles, 0, 0)
        }
    }

    pub fn with_full_rank_check(mut self) -> Self {
        self.require_full_rank = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == DatasetKind::IdxFiles {
            if self.images_path.is_none() || self.labels_path.is_none() {
                return Err(Error::InvalidInput("IDX datasets need image and label paths".into()));
            }
            return Ok(());
        }
        if self.d == 0 || self.n == 0 {
            return Err(Error::InvalidInput("d and n must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidInput(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.kind == DatasetKind::GaussianBlobs {
            if self.num_classes < 2 {
                return Err(Error::InvalidInput("blobs need at least two classes".into()));
            }
            if self.num_classes > 2 && self.num_classes > self.d {
                return Err(Error::InvalidInput("more than two blobs need d >= num_classes".into()));
            }
            if !(self.separation > 0.0) {
                return Err(Error::InvalidInput("blob separation must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Inputs and, for labeled kinds, class indices per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Option<Vec<usize>>,
}

/// Draws the dataset described by `spec`.
///
/// With `require_full_rank`, a rank-deficient Gaussian draw is resampled
/// once and then reported as [`Error::Precondition`].
pub fn generate(spec: &DatasetSpec, rng: &mut RngHandle) -> Result<Dataset> {
    spec.validate()?;
    match spec.kind {
        DatasetKind::GaussianMatrix => {
            if spec.require_full_rank && spec.n < spec.d {
                return Err(Error::Precondition(format!(
                    "rank {} input impossible with {} samples",
                    spec.d, spec.n
                )));
            }
            for _ in 0..2 {
                let x = rng.gaussian_matrix(spec.d, spec.n);
                if !spec.require_full_rank || hard_rank(&SingularSpectrum::of_matrix(&x)) == spec.d {
                    return Ok(Dataset { x, labels: None });
                }
            }
            Err(Error::Precondition("two consecutive rank-deficient Gaussian draws".into()))
        }
        DatasetKind::NearCollinear => Ok(Dataset {
            x: near_collinear_state(spec.d, spec.n, spec.epsilon, rng)?.h,
            labels: None,
        }),
        DatasetKind::GaussianBlobs => {
            let k = spec.num_classes;
            let labels: Vec<usize> = (0..spec.n).map(|i| i % k).collect();
            let mut x = rng.gaussian_matrix(spec.d, spec.n);
            for (j, &c) in labels.iter().enumerate() {
                if k == 2 {
                    let sign = if c == 0 { 1.0 } else { -1.0 };
                    x[(0, j)] += sign * spec.separation / 2.0;
                } else {
                    x[(c, j)] += spec.separation / 2f64.sqrt();
                }
            }
            Ok(Dataset {
                x,
                labels: Some(labels),
            })
        }
        DatasetKind::IdxFiles => {
            let images = spec.images_path.as_deref().expect("validated");
            let labels = spec.labels_path.as_deref().expect("validated");
            let (x, labels) = load_idx(images, labels)?;
            Ok(Dataset {
                x,
                labels: Some(labels),
            })
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::format(
            bytes.len() as u64,
            format!("file ends inside the header field at byte {offset}"),
        )),
    }
}

fn expect_magic(bytes: &[u8], magic: u32) -> Result<()> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::format(0, format!("magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    let end = start + len;
    if bytes.len() < end {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: expected {len} bytes from offset {start}"),
        ));
    }
    if bytes.len() > end {
        return Err(Error::format(end as u64, "trailing bytes after payload"));
    }
    Ok(&bytes[start..end])
}

/// Parses an IDX image file: returns `(rows, cols, images)` where column
/// `j` of `images` holds image `j` in row-major pixel order, scaled to
/// `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Matrix)> {
    expect_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = rows * cols;
    let data = payload(bytes, 16, count * pixels)?;
    let x = Matrix::from_column_slice(
        pixels,
        count,
        &data.iter().map(|&b| f64::from(b) / 255.0).collect::<Vec<_>>(),
    );
    Ok((rows, cols, x))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    expect_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label pair of IDX files.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let (_, _, x) = parse_idx_images(&fs::read(images_path)?)?;
    let label_bytes = fs::read(labels_path)?;
    let labels = parse_idx_labels(&label_bytes)?;
    if labels.len() != x.ncols() {
        return Err(Error::format(
            4,
            format!("{} labels for {} images", labels.len(), x.ncols()),
        ));
    }
    Ok((x, labels))
}

/// Encodes images (columns of `x`, values in `[0, 1]`, rounded to the
/// nearest byte) as an IDX image file.
pub fn encode_idx_images(x: &Matrix, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != x.nrows() {
        return Err(Error::InvalidInput(format!(
            "{rows}x{cols} images need {} pixels, matrix has {}",
            rows * cols,
            x.nrows()
        )));
    }
    let mut out = Vec::with_capacity(16 + x.len());
    for v in [IDX_IMAGES_MAGIC, x.ncols() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for &p in x.as_slice() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("pixel value {p} outside [0, 1]")));
        }
        out.push((p * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        out.push(u8::try_from(y).map_err(|_| Error::InvalidInput(format!("label {y} exceeds 255")))?);
    }
    Ok(out)
}

/// Writes an image/label pair readable by [`load_idx`].
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    x: &Matrix,
    rows: usize,
    cols: usize,
    labels: &[usize],
) -> Result<()> {
    fs::write(images_path, encode_idx_images(x, rows, cols)?)?;
    fs::write(labels_path, encode_idx_labels(labels)?)?;
    Ok(())
}
