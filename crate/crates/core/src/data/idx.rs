use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

use super::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images from an IDX file, pixels scaled to `[0, 1]` and flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<f64>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::IdxTruncated {
                path: self.name.to_string(),
                detail: format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            }),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32_be("magic")?;
        if found != expected {
            return Err(Error::IdxWrongMagic { found, expected });
        }
        Ok(())
    }
}

pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<IdxImages> {
    let mut r = Reader {
        bytes,
        pos: 0,
        name,
    };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    let size = rows * cols;
    let data = r.take(count * size, "pixel data")?;
    let pixels = if size == 0 {
        vec![Vec::new(); count]
    } else {
        data.chunks(size)
            .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
            .collect()
    };
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        name,
    };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32_be("label count")? as usize;
    Ok(r.take(count, "label data")?.to_vec())
}

/// Summary of what [`load_idx`] kept.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxLoad {
    pub dataset: Dataset,
    /// All-zero images, which cannot be put on the unit sphere.
    pub dropped_zero: usize,
    /// Exact duplicates of an earlier image after normalization.
    pub dropped_duplicate: usize,
}

/// Loads an image/label IDX pair. Each image is flattened, scaled to
/// `[0, 1]` and L2-normalized; targets are one-hot over
/// `max_label + 1` classes. All-zero and duplicate images are dropped.
/// `limit` keeps only the first that many examples of the files.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<IdxLoad> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let images = parse_idx_images(&image_bytes, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&label_bytes, &labels_path.display().to_string())?;
    idx_to_dataset(images, labels, limit)
}

pub(crate) fn idx_to_dataset(
    images: IdxImages,
    labels: Vec<u8>,
    limit: Option<usize>,
) -> Result<IdxLoad> {
    if images.pixels.len() != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: images.pixels.len(),
            labels: labels.len(),
        });
    }
    let take = limit.unwrap_or(usize::MAX).min(labels.len());
    let classes = labels[..take]
        .iter()
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1);

    let mut seen = HashSet::new();
    let (mut inputs, mut targets, mut kept_labels) = (Vec::new(), Vec::new(), Vec::new());
    let (mut dropped_zero, mut dropped_duplicate) = (0, 0);
    for (px, &label) in images.pixels.into_iter().zip(&labels).take(take) {
        let norm = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            dropped_zero += 1;
            continue;
        }
        let x: Vec<f64> = px.iter().map(|v| v / norm).collect();
        if !seen.insert(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>()) {
            dropped_duplicate += 1;
            continue;
        }
        let mut y = vec![0.0; classes];
        y[label as usize] = 1.0;
        inputs.push(x);
        targets.push(y);
        kept_labels.push(label as usize);
    }
    Ok(IdxLoad {
        dataset: Dataset::new(inputs, targets, Some(kept_labels))?,
        dropped_zero,
        dropped_duplicate,
    })
}
