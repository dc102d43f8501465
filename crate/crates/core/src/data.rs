//! Labelled image sets and readers for the MNIST IDX and CIFAR-10 binary
//! formats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Images in `[0, 1]` shaped `[n, c, h, w]`, with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Dimension {
                op: "dataset images",
                lhs: images.shape().to_vec(),
                rhs: vec![0; 4],
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("pixel {v} outside [0, 1]")));
        }
        Ok(Dataset {
            images,
            labels,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Examples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.slice_outer(start, end)?,
            labels: self.labels[start..end].to_vec(),
            split: self.split.clone(),
        })
    }

    /// The first `n` examples (all of them if there are fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        self.slice(0, n.min(self.len()))
    }

    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        let labels = rows
            .iter()
            .map(|&r| {
                self.labels
                    .get(r)
                    .copied()
                    .ok_or_else(|| Error::Index(format!("row {r} of {}", self.len())))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            images: self.images.select_outer(rows)?,
            labels,
            split: self.split.clone(),
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Integrity(format!("{}: header truncated", path.display())))
}

/// Parses an IDX file, returning its dimension sizes and payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("{}: not an IDX file", path.display())));
    }
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{}: magic {found:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let want: usize = dims.iter().product();
    let body = &bytes[start..];
    if body.len() != want {
        return Err(Error::Integrity(format!(
            "{}: {} payload bytes, header promises {want}",
            path.display(),
            body.len()
        )));
    }
    Ok((dims, body))
}

/// Reads an IDX image file and its label file. Pixels are scaled by 1/255.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: &str) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;
    let (idims, ibody) = parse_idx(&ib, IDX_IMAGES, ip)?;
    let (ldims, lbody) = parse_idx(&lb, IDX_LABELS, lp)?;
    if idims[0] != ldims[0] {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            ip.display(),
            idims[0],
            lp.display(),
            ldims[0]
        )));
    }
    let labels: Vec<usize> = lbody.iter().map(|&b| b as usize).collect();
    if let Some(l) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Format(format!("{}: label {l} out of range", lp.display())));
    }
    let pixels = ibody.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], pixels)?;
    Dataset::new(images, labels, split)
}

/// Standard file names of an MNIST split inside `dir`.
pub fn mnist_files(dir: impl AsRef<Path>, train: bool) -> (std::path::PathBuf, std::path::PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    let d = dir.as_ref();
    (
        d.join(format!("{prefix}-images-idx3-ubyte")),
        d.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist_dir(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let (i, l) = mnist_files(dir, train);
    load_mnist_idx(i, l, if train { "train" } else { "test" })
}

/// Decodes CIFAR-10 binary records: a label byte, then 3x32x32 channel-major
/// pixel bytes.
pub fn parse_cifar10(bytes: &[u8], split: &str) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(Error::Format(format!("label byte {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, split)
}

pub fn load_cifar10_file(path: impl AsRef<Path>, split: &str) -> Result<Dataset> {
    let p = path.as_ref();
    parse_cifar10(&read(p)?, split).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
        other => other,
    })
}

/// Loads `data_batch_1.bin` .. `data_batch_5.bin` (train) or
/// `test_batch.bin` (test) from `dir`. Missing training batches after the
/// first are skipped, so a directory holding one batch also loads.
pub fn load_cifar10_bin(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let d = dir.as_ref();
    if !train {
        return load_cifar10_file(d.join("test_batch.bin"), "test");
    }
    let mut bytes = read(&d.join("data_batch_1.bin"))?;
    for i in 2..=5 {
        let p = d.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            bytes.extend(read(&p)?);
        }
    }
    parse_cifar10(&bytes, "train")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v.extend(body);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let body: Vec<u8> = (0..2 * 4).map(|i| [0u8, 255, 51, 7][i % 4]).collect();
        let i = write(dir.path(), "i", &idx(IDX_IMAGES, &[2, 2, 2], &body));
        let l = write(dir.path(), "l", &idx(IDX_LABELS, &[2], &[3, 9]));
        let d = load_mnist_idx(&i, &l, "test").unwrap();
        assert_eq!(d.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(d.labels, vec![3, 9]);
        assert_eq!(d.images.data()[1], 1.0);
        assert_eq!(d.images.data()[2], 0.2);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good_l = write(dir.path(), "l", &idx(IDX_LABELS, &[2], &[1, 2]));
        let bad_magic = write(dir.path(), "m", &idx(IDX_LABELS, &[2, 1, 1], &[0, 0]));
        assert!(matches!(
            load_mnist_idx(&bad_magic, &good_l, "x"),
            Err(Error::Format(_))
        ));
        let short = write(dir.path(), "s", &idx(IDX_IMAGES, &[2, 2, 2], &[0; 7]));
        assert!(matches!(load_mnist_idx(&short, &good_l, "x"), Err(Error::Integrity(_))));
        let head = write(dir.path(), "h", &IDX_IMAGES.to_be_bytes()[..]);
        assert!(matches!(load_mnist_idx(&head, &good_l, "x"), Err(Error::Integrity(_))));
        let three = write(dir.path(), "t", &idx(IDX_IMAGES, &[3, 1, 1], &[0; 3]));
        assert!(matches!(
            load_mnist_idx(&three, &good_l, "x"),
            Err(Error::Consistency(_))
        ));
        let empty = write(dir.path(), "e", &[]);
        assert!(matches!(load_mnist_idx(&empty, &good_l, "x"), Err(Error::Format(_))));
        assert!(matches!(
            load_mnist_idx(dir.path().join("missing"), &good_l, "x"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn cifar_records_decode_channel_major() {
        let mut rec = vec![9u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let mut bytes = rec.clone();
        bytes.extend(&rec);
        bytes[CIFAR_RECORD] = 4;
        let d = parse_cifar10(&bytes, "train").unwrap();
        assert_eq!(d.labels, vec![9, 4]);
        assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
        // Pixel (c=1, y=0, x=5) sits at byte 1 + 1024 + 5.
        assert_eq!(d.images.data()[1024 + 5], ((1024 + 5) % 256) as f64 / 255.0);
        assert!(matches!(parse_cifar10(&bytes[1..], "x"), Err(Error::Format(_))));
        assert!(matches!(parse_cifar10(&[], "x"), Err(Error::Format(_))));
    }

    #[test]
    fn subsets() {
        let t = Tensor::new(vec![3, 1, 1, 1], vec![0.0, 0.5, 1.0]).unwrap();
        let d = Dataset::new(t, vec![0, 1, 2], "x").unwrap();
        assert_eq!(d.slice(1, 3).unwrap().labels, vec![1, 2]);
        assert_eq!(d.select(&[2, 0]).unwrap().images.data(), &[1.0, 0.0]);
        assert_eq!(d.take(10).unwrap().len(), 3);
        assert!(d.select(&[3]).is_err());
        let bad = Tensor::new(vec![1, 1, 1, 1], vec![1.5]).unwrap();
        assert!(matches!(Dataset::new(bad, vec![0], "x"), Err(Error::Range(_))));
    }
}
