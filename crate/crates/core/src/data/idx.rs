//! Big-endian IDX files as distributed with MNIST and Fashion-MNIST.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{DatasetSplit, SampleId, SequenceRecord};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    /// Element type code (0x08 = unsigned byte).
    pub dtype: u8,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn byte_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }
}

pub fn read_idx_header(bytes: &[u8]) -> Result<IdxHeader> {
    if bytes.len() < 4 {
        return Err(Error::Format(
            "IDX file shorter than its magic number".into(),
        ));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format(format!("bad IDX magic {magic}")));
    }
    let dtype = bytes[2];
    let ndims = bytes[3] as usize;
    let need = 4 + 4 * ndims;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "truncated IDX header: {} of {need} bytes",
            bytes.len()
        )));
    }
    let dims = (0..ndims)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")))
        .collect();
    Ok(IdxHeader { magic, dtype, dims })
}

/// Images scaled to `[0, 1]`, row-major per image.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxDataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let header = read_idx_header(bytes)?;
    if header.magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "expected image magic {IDX_IMAGES_MAGIC}, found {}",
            header.magic
        )));
    }
    if header.dims.len() != 3 {
        return Err(Error::Format(format!(
            "image file has {} dimensions, expected 3",
            header.dims.len()
        )));
    }
    let (n, rows, cols) = (
        header.dims[0] as usize,
        header.dims[1] as usize,
        header.dims[2] as usize,
    );
    let body = &bytes[header.byte_len()..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::Format(format!(
            "truncated image data: {} of {need} bytes",
            body.len()
        )));
    }
    let images = body[..need]
        .chunks_exact(rows * cols)
        .map(|px| px.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let header = read_idx_header(bytes)?;
    if header.magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "expected label magic {IDX_LABELS_MAGIC}, found {}",
            header.magic
        )));
    }
    if header.dims.len() != 1 {
        return Err(Error::Format(format!(
            "label file has {} dimensions, expected 1",
            header.dims.len()
        )));
    }
    let n = header.dims[0] as usize;
    let body = &bytes[header.byte_len()..];
    if body.len() < n {
        return Err(Error::Format(format!(
            "truncated label data: {} of {n} bytes",
            body.len()
        )));
    }
    Ok(body[..n].to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxDataset> {
    let (rows, cols, images) = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if labels.len() != images.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(IdxDataset {
        rows,
        cols,
        images,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sequencing {
    /// One pixel per step in scan-line order.
    Pixel,
    /// One image row per step.
    Row,
}

pub fn to_pixel_sequence(image: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows * cols, 1, image.to_vec()).expect("image has rows*cols pixels")
}

pub fn to_row_sequence(image: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, image.to_vec()).expect("image has rows*cols pixels")
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `limit` images as sequence records with ids `first_id..`.
    pub fn to_records(
        &self,
        seq: Sequencing,
        first_id: SampleId,
        limit: Option<usize>,
    ) -> Vec<SequenceRecord> {
        let n = limit.map_or(self.len(), |l| l.min(self.len()));
        (0..n)
            .map(|i| SequenceRecord {
                sample_id: first_id + i as SampleId,
                features: match seq {
                    Sequencing::Pixel => to_pixel_sequence(&self.images[i], self.rows, self.cols),
                    Sequencing::Row => to_row_sequence(&self.images[i], self.rows, self.cols),
                },
                label: Some(self.labels[i] as usize),
            })
            .collect()
    }
}

/// Loads the standard four files from `dir`. Test ids continue after the
/// train ids so the two sets are disjoint.
pub fn load_idx_split(
    dir: &Path,
    seq: Sequencing,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<DatasetSplit> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    let train_records = train.to_records(seq, 0, train_limit);
    let test_records = test.to_records(seq, train.len() as SampleId, test_limit);
    Ok(DatasetSplit {
        train: train_records,
        test: test_records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Hand-built IDX image file: magic, count, rows, cols, then pixels.
    fn image_file(pixels: &[[u8; 4]]) -> Vec<u8> {
        let mut b = vec![0x00, 0x00, 0x08, 0x03];
        b.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
        b.extend_from_slice(&[0, 0, 0, 2, 0, 0, 0, 2]);
        for p in pixels {
            b.extend_from_slice(p);
        }
        b
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut b = vec![0x00, 0x00, 0x08, 0x01];
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn hand_built_fixture() {
        let px = [
            [0, 255, 51, 102],
            [1, 2, 3, 4],
            [255, 255, 0, 0],
            [17, 34, 68, 136],
        ];
        let bytes = image_file(&px);
        // 16 header bytes, 2051 = 0x00000803
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(bytes.len(), 16 + 16);
        let (rows, cols, images) = parse_idx_images(&bytes).unwrap();
        assert_eq!((rows, cols, images.len()), (2, 2, 4));
        for (img, raw) in images.iter().zip(&px) {
            for (v, &p) in img.iter().zip(raw) {
                assert_eq!(*v, p as f64 / 255.0);
                assert_eq!((v * 255.0).round() as u8, p);
            }
        }
        assert_eq!(
            parse_idx_labels(&label_file(&[3, 1, 4, 1])).unwrap(),
            vec![3, 1, 4, 1]
        );
    }

    #[test]
    fn wrong_magic_rejected() {
        let labels_as_images = image_file(&[[0; 4]]);
        match parse_idx_labels(&labels_as_images) {
            Err(Error::Format(msg)) => assert!(msg.contains("2051"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(parse_idx_images(&label_file(&[1])).is_err());
    }

    #[test]
    fn truncation_rejected() {
        let bytes = image_file(&[[1, 2, 3, 4], [5, 6, 7, 8]]);
        assert!(parse_idx_images(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_idx_images(&bytes[..10]).is_err());
        let labels = label_file(&[1, 2, 3]);
        assert!(parse_idx_labels(&labels[..labels.len() - 1]).is_err());
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("img"),
            image_file(&[[9, 0, 0, 0], [0, 0, 0, 9]]),
        )
        .unwrap();
        std::fs::write(dir.path().join("lbl"), label_file(&[7, 2])).unwrap();
        let ds = load_idx(&dir.path().join("img"), &dir.path().join("lbl")).unwrap();
        assert_eq!(ds.labels, vec![7, 2]);
        std::fs::write(dir.path().join("lbl3"), label_file(&[7, 2, 1])).unwrap();
        assert!(load_idx(&dir.path().join("img"), &dir.path().join("lbl3")).is_err());
        assert!(matches!(
            load_idx(&dir.path().join("missing"), &dir.path().join("lbl")),
            Err(Error::Io(_))
        ));
    }

    fn blank() -> Vec<f64> {
        vec![0.0; 28 * 28]
    }

    #[test]
    fn pixel_scan_order() {
        let mut img = blank();
        img[3] = 1.0; // (0, 3)
        let seq = to_pixel_sequence(&img, 28, 28);
        assert_eq!(seq.shape(), (784, 1));
        let lit: Vec<usize> = (0..784).filter(|&t| seq.get(t, 0) != 0.0).collect();
        assert_eq!(lit, vec![3]); // step 4, 1-based
        assert!(to_pixel_sequence(&blank(), 28, 28)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn row_sequence_layout() {
        let mut img = blank();
        img[5 * 28 + 9] = 0.5;
        let seq = to_row_sequence(&img, 28, 28);
        assert_eq!(seq.shape(), (28, 28));
        assert_eq!(seq.get(5, 9), 0.5);
        assert_eq!(seq.sum(), 0.5);
        assert!(to_row_sequence(&blank(), 28, 28)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn sequences_match_index_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img: Vec<f64> = (0..784).map(|_| rng.gen::<f64>()).collect();
        let pixel = to_pixel_sequence(&img, 28, 28);
        let row = to_row_sequence(&img, 28, 28);
        for _ in 0..100 {
            let (r, c) = (rng.gen_range(0..28), rng.gen_range(0..28));
            // 1-based step 28r + c + 1
            assert_eq!(pixel.get(28 * r + c, 0), img[r * 28 + c]);
            assert_eq!(row.get(r, c), img[r * 28 + c]);
        }
    }
}
