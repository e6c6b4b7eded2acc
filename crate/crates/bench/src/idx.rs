//! Reader for the IDX files MNIST is distributed in.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use frcl_core::Matrix;

use crate::error::{io_err, BenchError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images kept as raw bytes; one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.width..(i + 1) * self.width]
    }

    /// Rows `idx`, pixels scaled into [0, 1] and columns read through `perm`
    /// (`out[j] = image[perm[j]]`) when given.
    pub fn to_matrix(&self, idx: &[usize], perm: Option<&[usize]>) -> Matrix {
        let w = self.width;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            let img = self.image(i);
            match perm {
                Some(p) => data.extend(p.iter().map(|&j| f64::from(img[j]) / 255.0)),
                None => data.extend(img.iter().map(|&v| f64::from(v) / 255.0)),
            }
        }
        Matrix::new(idx.len(), w, data).expect("row-major buffer of the right size")
    }
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(BenchError::TruncatedFile { path: path.into(), len: bytes.len(), needed: need });
    }
    let found = BigEndian::read_u32(bytes);
    if found != magic {
        return Err(BenchError::BadMagic { path: path.into(), expected: magic, found });
    }
    Ok((0..dims).map(|d| BigEndian::read_u32(&bytes[4 + 4 * d..]) as usize).collect())
}

fn body<'a>(path: &Path, bytes: &'a [u8], offset: usize, len: usize) -> Result<&'a [u8]> {
    let needed = offset + len;
    if bytes.len() < needed {
        return Err(BenchError::TruncatedFile { path: path.into(), len: bytes.len(), needed });
    }
    Ok(&bytes[offset..needed])
}

/// Parses an images file (`0x00000803`, N, rows, cols, then N·rows·cols bytes).
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let d = header(path, bytes, IMAGES_MAGIC, 3)?;
    let width = d[1] * d[2];
    Ok((d[0], width, body(path, bytes, 16, d[0] * width)?.to_vec()))
}

/// Parses a labels file (`0x00000801`, N, then N bytes).
pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let d = header(path, bytes, LABELS_MAGIC, 1)?;
    Ok(body(path, bytes, 8, d[0])?.to_vec())
}

pub fn load_idx_raw(images: &Path, labels: &Path) -> Result<RawImages> {
    let read = |p: &Path| fs::read(p).map_err(io_err(PathBuf::from(p)));
    let (n, width, pixels) = parse_images(images, &read(images)?)?;
    let labels = parse_labels(labels, &read(labels)?)?;
    if labels.len() != n {
        return Err(BenchError::CountMismatch { images: n, labels: labels.len() });
    }
    Ok(RawImages { width, pixels, labels })
}

/// Images scaled into [0, 1], one per row, with their labels.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Matrix, Vec<usize>)> {
    let raw = load_idx_raw(images, labels)?;
    let all: Vec<usize> = (0..raw.len()).collect();
    Ok((raw.to_matrix(&all, None), raw.labels.iter().map(|&l| l as usize).collect()))
}

/// The MNIST training and test files in `dir`, under their usual names.
pub fn load_mnist(dir: &Path) -> Result<(RawImages, RawImages)> {
    let train = load_idx_raw(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx_raw(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}
