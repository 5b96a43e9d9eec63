//! Big-endian IDX files (the MNIST distribution format), optionally gzipped.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::image::Image;

/// Element type code for unsigned bytes, the only one MNIST uses.
const UBYTE: u8 = 0x08;

/// Decoded IDX payload: dimensions and raw unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Idx("bad magic".into()));
    }
    if bytes[2] != UBYTE {
        return Err(Error::Idx(format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Idx("truncated dimension header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let count = count.ok_or_else(|| Error::Idx("dimension product overflows".into()))?;
    if bytes.len() - header != count {
        return Err(Error::Idx(format!(
            "payload has {} bytes, dimensions {dims:?} need {count}",
            bytes.len() - header
        )));
    }
    Ok(IdxArray { dims, data: bytes[header..].to_vec() })
}

/// Reads a file, transparently inflating gzip.
pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let raw = std::fs::read(path.as_ref())?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        parse_idx(&out)
    } else {
        parse_idx(&raw)
    }
}

/// `[N, H, W]` bytes → single-channel images scaled to `[0, 1]`.
pub fn images_from_idx(arr: &IdxArray) -> Result<Vec<Image>> {
    let [n, h, w] = arr.dims[..] else {
        return Err(Error::Idx(format!("image file must be 3-D, got {:?}", arr.dims)));
    };
    (0..n)
        .map(|i| {
            let px = arr.data[i * h * w..(i + 1) * h * w].iter().map(|&b| b as f32 / 255.0).collect();
            Image::from_vec(1, h, w, px)
        })
        .collect()
}

pub fn labels_from_idx(arr: &IdxArray) -> Result<Vec<usize>> {
    if arr.dims.len() != 1 {
        return Err(Error::Idx(format!("label file must be 1-D, got {:?}", arr.dims)));
    }
    Ok(arr.data.iter().map(|&b| b as usize).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistPart {
    Train,
    Test,
}

/// `$MNIST_DIR`, else the `data/mnist` directory shipped with the workspace.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.exists())
        .ok_or_else(|| Error::NotFound(format!("{stem}[.gz] not found in {}", dir.display())))
}

/// Loads up to `limit` image/label pairs of one MNIST part.
pub fn load_mnist(dir: impl AsRef<Path>, part: MnistPart, limit: Option<usize>) -> Result<(Vec<Image>, Vec<usize>)> {
    let prefix = match part {
        MnistPart::Train => "train",
        MnistPart::Test => "t10k",
    };
    let dir = dir.as_ref();
    let mut images = images_from_idx(&read_idx(find(dir, &format!("{prefix}-images-idx3-ubyte"))?)?)?;
    let mut labels = labels_from_idx(&read_idx(find(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?)?;
    if images.len() != labels.len() {
        return Err(Error::Idx(format!("{} images but {} labels", images.len(), labels.len())));
    }
    if let Some(n) = limit {
        images.truncate(n);
        labels.truncate(n);
    }
    Ok((images, labels))
}
