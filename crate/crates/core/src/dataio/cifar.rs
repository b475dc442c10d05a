use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::pyramid::ImageShape;

/// One label byte followed by 3×32×32 channel-major pixel bytes.
pub const RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const RECORDS_PER_FILE: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

/// Images in `[0, 1]`, in on-disk record order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: ImageShape,
    /// `N × C×H×W`, flattened.
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: ImageShape, images: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * shape.len() {
            return Err(Error::invalid(format!(
                "{} pixel values do not hold {} images of {:?}",
                images.len(),
                labels.len(),
                shape.dims()
            )));
        }
        Ok(Dataset {
            shape,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.shape.dims().to_vec(), self.pixels(i).to_vec()).expect("image shape")
    }

    /// The first `count` records, in order.
    pub fn subset(&self, count: usize) -> Result<Dataset> {
        if count > self.len() {
            return Err(Error::invalid(format!(
                "subset of {count} requested from {} records",
                self.len()
            )));
        }
        Ok(Dataset {
            shape: self.shape,
            images: self.images[..count * self.shape.len()].to_vec(),
            labels: self.labels[..count].to_vec(),
        })
    }

    /// Block-averages every image by an integer factor.
    pub fn downscale(&self, factor: usize) -> Result<Dataset> {
        let side = self.shape.side;
        if factor == 0 || !side.is_multiple_of(factor) || !(side / factor).is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "cannot downscale side {side} by {factor} to an even side"
            )));
        }
        let ns = side / factor;
        let shape = ImageShape {
            channels: self.shape.channels,
            side: ns,
        };
        let norm = (factor * factor) as f64;
        let mut images = Vec::with_capacity(self.len() * shape.len());
        for i in 0..self.len() {
            let px = self.pixels(i);
            for c in 0..shape.channels {
                for y in 0..ns {
                    for x in 0..ns {
                        let mut acc = 0.0;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                acc += px[(c * side + y * factor + dy) * side + x * factor + dx];
                            }
                        }
                        images.push(acc / norm);
                    }
                }
            }
        }
        Dataset::new(shape, images, self.labels.clone())
    }

    /// FNV-1a over labels and the little-endian pixel values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        self.labels.iter().for_each(|&b| eat(b));
        for v in &self.images {
            v.to_le_bytes().into_iter().for_each(&mut eat);
        }
        h
    }
}

/// Decodes whole CIFAR-10 records; pixels are normalized as `x / 255`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f64>, Vec<u8>)> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::format(
            "CIFAR-10 batch",
            format!("{} bytes is not a whole number of records", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut images = Vec::with_capacity(n * (RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(
                "CIFAR-10 batch",
                format!("record {i} has label byte {}", rec[0]),
            ));
        }
        labels.push(rec[0]);
        images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((images, labels))
}

/// Loads CIFAR-10 binary batch files, concatenating records in the given order.
pub fn load_cifar10(paths: &[PathBuf]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != RECORDS_PER_FILE * RECORD_LEN {
            return Err(Error::format(
                "CIFAR-10 batch",
                format!(
                    "{} has {} bytes, expected {}",
                    path.display(),
                    bytes.len(),
                    RECORDS_PER_FILE * RECORD_LEN
                ),
            ));
        }
        let (im, lb) = parse_cifar10(&bytes)?;
        images.extend(im);
        labels.extend(lb);
    }
    Dataset::new(ImageShape::CIFAR, images, labels)
}

/// Canonical batch files of a split that exist under `dir`.
///
/// Training batches are taken as `data_batch_1.bin`, `data_batch_2.bin`, ...
/// up to the first missing one; the standard `cifar-10-batches-bin`
/// subdirectory is searched as well.
pub fn split_files(dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let nested = dir.join("cifar-10-batches-bin");
    let root = if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    };
    let files: Vec<PathBuf> = match split {
        Split::Test => vec![root.join("test_batch.bin")],
        Split::Train => (1..=5)
            .map(|k| root.join(format!("data_batch_{k}.bin")))
            .take_while(|p| p.is_file())
            .collect(),
    };
    if files.is_empty() || !files[0].is_file() {
        return Err(Error::io(
            files
                .first()
                .cloned()
                .unwrap_or_else(|| root.join("data_batch_1.bin")),
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "CIFAR-10 batch file not found",
            ),
        ));
    }
    Ok(files)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    load_cifar10(&split_files(dir, split)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..RECORD_LEN - 1).map(fill));
        r
    }

    #[test]
    fn parses_layout_and_normalizes() {
        let mut bytes = record(3, |i| (i % 256) as u8);
        bytes.extend(record(9, |_| 255));
        let (images, labels) = parse_cifar10(&bytes).unwrap();
        assert_eq!(labels, vec![3, 9]);
        // Red plane first, row-major: pixel (c=1, y=0, x=5) sits at 1024 + 5.
        assert_eq!(images[1024 + 5], ((1024 + 5) % 256) as f64 / 255.0);
        assert!(images[3072..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_bad_label_and_partial_record() {
        assert!(parse_cifar10(&record(10, |_| 0)).is_err());
        assert!(parse_cifar10(&[0u8; 100]).is_err());
    }

    #[test]
    fn loader_checks_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        std::fs::write(&p, record(1, |_| 0)).unwrap();
        assert!(matches!(load_cifar10(&[p]), Err(Error::Format { .. })));
        assert!(matches!(
            load_split(&dir.path().join("missing"), Split::Test),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn subset_and_downscale() {
        let shape = ImageShape {
            channels: 1,
            side: 4,
        };
        let images: Vec<f64> = (0..48).map(|v| v as f64).collect();
        let ds = Dataset::new(shape, images, vec![0, 1, 2]).unwrap();
        assert_eq!(ds.subset(3).unwrap(), ds);
        let s = ds.subset(2).unwrap();
        assert_eq!(s.labels, vec![0, 1]);
        assert_eq!(s.pixels(1), ds.pixels(1));
        assert!(ds.subset(4).is_err());
        let d = ds.downscale(2).unwrap();
        assert_eq!(d.shape.side, 2);
        assert_eq!(d.pixels(0), [2.5, 4.5, 10.5, 12.5]);
        assert!(ds.downscale(4).is_err());
        assert_ne!(ds.checksum(), s.checksum());
        assert_eq!(ds.checksum(), ds.clone().checksum());
    }
}
