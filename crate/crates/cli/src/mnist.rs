//! IDX files and the MNIST digit set.
//!
//! IDX layout: big-endian magic `0x0000 TT NN` (`TT` element type, `NN`
//! rank), `NN` big-endian u32 dimensions, then the elements. Only unsigned
//! byte elements (`TT = 0x08`) are supported, which covers MNIST.

use std::fs;
use std::path::{Path, PathBuf};

use binnet::tensor::TensorF32;

use crate::error::{CliError, Context, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const ROWS: usize = 28;
pub const COLS: usize = 28;
pub const PIXELS: usize = ROWS * COLS;
pub const CLASSES: usize = 10;

const UBYTE: u8 = 0x08;

/// A parsed IDX file of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Idx {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl Idx {
    pub fn magic(&self) -> u32 {
        ((UBYTE as u32) << 8) | self.dims.len() as u32
    }

    pub fn parse(bytes: &[u8]) -> std::result::Result<Idx, String> {
        if bytes.len() < 4 {
            return Err("file shorter than the IDX header".into());
        }
        if bytes[0] != 0 || bytes[1] != 0 {
            return Err(format!("bad IDX magic {:02x?}", &bytes[..4]));
        }
        if bytes[2] != UBYTE {
            return Err(format!("IDX element type 0x{:02x} is not unsigned byte", bytes[2]));
        }
        let rank = bytes[3] as usize;
        let header = 4 + 4 * rank;
        if rank == 0 || bytes.len() < header {
            return Err(format!("IDX header of rank {rank} is truncated"));
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("IDX dimensions overflow")?;
        let body = &bytes[header..];
        if body.len() != count {
            return Err(format!(
                "IDX dims {dims:?} need {count} bytes of data, found {}",
                body.len()
            ));
        }
        Ok(Idx {
            dims,
            data: body.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read(path: &Path) -> Result<Idx> {
        let bytes = fs::read(path).ctx(format!("reading {}", path.display()))?;
        Idx::parse(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    pub fn image_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}-images-idx3-ubyte", self.stem()))
    }

    pub fn label_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}-labels-idx1-ubyte", self.stem()))
    }
}

/// Images `[n, 1, 28, 28]` scaled to `[0, 1]` with their labels.
#[derive(Debug, Clone)]
pub struct MnistDataset {
    pub images: TensorF32,
    pub labels: Vec<usize>,
}

/// Pixel bytes to `[0, 1]`.
pub fn scale_pixels(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32 / 255.0).collect()
}

impl MnistDataset {
    pub fn from_idx(images: &Idx, labels: &Idx) -> std::result::Result<Self, String> {
        if images.magic() != IMAGE_MAGIC || images.dims[1..] != [ROWS, COLS] {
            return Err(format!("image file has dims {:?}, expected [n, 28, 28]", images.dims));
        }
        if labels.magic() != LABEL_MAGIC {
            return Err(format!("label file has dims {:?}, expected [n]", labels.dims));
        }
        let n = images.dims[0];
        if labels.dims[0] != n {
            return Err(format!("{n} images but {} labels", labels.dims[0]));
        }
        if n == 0 {
            return Err("empty data set".into());
        }
        if let Some(bad) = labels.data.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(format!("label {bad} outside 0..{CLASSES}"));
        }
        let images = TensorF32::new([n, 1, ROWS, COLS], scale_pixels(&images.data)).map_err(|e| e.to_string())?;
        Ok(MnistDataset {
            images,
            labels: labels.data.iter().map(|&l| l as usize).collect(),
        })
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let images = Idx::read(&split.image_path(dir))?;
        let labels = Idx::read(&split.label_path(dir))?;
        Self::from_idx(&images, &labels).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` items (all of them when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len()).max(1);
        MnistDataset {
            images: self.images.slice_batch(0, n).expect("n within the batch"),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Item `index` as a `[1, 1, 28, 28]` batch.
    pub fn item(&self, index: usize) -> Option<TensorF32> {
        (index < self.len()).then(|| self.images.slice_batch(index, index + 1).expect("index checked"))
    }
}
