//! Big-endian IDX files (the MNIST distribution format).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::LabeledDataset;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| self.truncated(what))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + len;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| self.truncated(what))?;
        self.pos = end;
        Ok(chunk)
    }

    fn truncated(&self, what: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.bytes.len(),
            reason: format!("file truncated while reading {what} at offset {}", self.pos),
        }
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32("magic number")?;
        if magic != expected {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: 0,
                reason: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: self.pos,
                reason: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into `(count × rows·cols)` bytes scaled by 1/255.
fn parse_images(path: &Path, bytes: &[u8]) -> Result<(Array2<f64>, [usize; 2])> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let pixels = r.take(count * rows * cols, "pixel data")?;
    r.finish()?;
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Array2::from_shape_vec((count, rows * cols), data).expect("sized above");
    Ok((images, [rows, cols]))
}

fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32("label count")? as usize;
    let labels = r.take(count, "label data")?;
    r.finish()?;
    Ok(labels.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair. Labels are assumed to cover `0..=max`; the
/// class count is `max + 1` (10 for MNIST).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let (images, _) = parse_images(images_path, &read(images_path)?)?;
    let labels = parse_labels(labels_path, &read(labels_path)?)?;
    if images.nrows() != labels.len() {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            reason: format!("{} labels for {} images in {}", labels.len(), images.nrows(), images_path.display()),
        });
    }
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    let name = images_path.file_name().map_or_else(|| "idx".to_string(), |f| f.to_string_lossy().into_owned());
    LabeledDataset::new(name, images, labels, num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn prefix(self) -> &'static str {
        match self {
            MnistSplit::Train => "train",
            MnistSplit::Test => "t10k",
        }
    }

    /// Standard image and label file paths of this split under `dir`.
    pub fn paths(self, dir: impl AsRef<Path>) -> (PathBuf, PathBuf) {
        let dir = dir.as_ref();
        let prefix = self.prefix();
        (
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    }
}

/// Loads MNIST from a directory holding the four standard IDX files.
pub fn load_mnist(dir: impl AsRef<Path>, split: MnistSplit) -> Result<LabeledDataset> {
    let (images, labels) = split.paths(dir);
    let mut ds = load_idx(&images, &labels)?;
    ds.name = format!("mnist-{}", split.prefix());
    Ok(ds)
}
