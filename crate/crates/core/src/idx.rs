//! Big-endian IDX reader for grayscale image sets (MNIST layout).
//!
//! Each image becomes a [`Task`] mapping normalized pixel coordinates
//! `(row / (H-1), col / (W-1))` to intensities scaled into `[0, 1]`.

use std::path::Path;

use crate::diff::Matrix;
use crate::error::{Error, Result};
use crate::tasks::{Task, TaskMeta};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, image after image.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[i * size..(i + 1) * size]
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        let word = self.bytes.get(self.offset..end).ok_or_else(|| Error::Idx {
            offset: self.offset,
            message: format!("truncated header: need 4 bytes, have {}", self.bytes.len() - self.offset),
        })?;
        self.offset = end;
        Ok(u32::from_be_bytes(word.try_into().expect("4 bytes")))
    }

    fn take(&mut self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.offset;
        if available < len {
            return Err(Error::Idx {
                offset: self.bytes.len(),
                message: format!("truncated payload: need {len} bytes, have {available}"),
            });
        }
        let start = self.offset;
        self.offset += len;
        Ok(&self.bytes[start..self.offset])
    }
}

fn expect_magic(cur: &mut Cursor<'_>, magic: u32) -> Result<()> {
    let found = cur.u32()?;
    if found != magic {
        return Err(Error::Idx {
            offset: 0,
            message: format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = Cursor { bytes, offset: 0 };
    expect_magic(&mut cur, IMAGES_MAGIC)?;
    let count = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    if rows < 2 || cols < 2 {
        return Err(Error::Idx {
            offset: 8,
            message: format!("images must be at least 2x2, got {rows}x{cols}"),
        });
    }
    let pixels = cur.take(count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor { bytes, offset: 0 };
    expect_magic(&mut cur, LABELS_MAGIC)?;
    let count = cur.u32()? as usize;
    Ok(cur.take(count)?.to_vec())
}

/// One task per image: coordinates in `[0,1]^2`, intensities `/ 255`.
pub fn image_task(images: &IdxImages, index: usize, label: Option<u8>) -> Task {
    let (h, w) = (images.rows, images.cols);
    let pixels = images.image(index);
    let xs = Matrix::from_shape_fn((h * w, 2), |(p, axis)| {
        if axis == 0 {
            (p / w) as f64 / (h - 1) as f64
        } else {
            (p % w) as f64 / (w - 1) as f64
        }
    });
    let ys = Matrix::from_shape_fn((h * w, 1), |(p, _)| f64::from(pixels[p]) / 255.0);
    Task::new(xs, ys, TaskMeta::Image { index, label })
}

/// Load up to `limit` images (all when `None`) as unsplit tasks.
pub fn load_idx_images(
    images_path: &Path,
    labels_path: Option<&Path>,
    limit: Option<usize>,
) -> Result<Vec<Task>> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = match labels_path {
        Some(p) => {
            let labels = parse_idx_labels(&std::fs::read(p)?)?;
            if labels.len() != images.count {
                return Err(Error::Idx {
                    offset: 4,
                    message: format!(
                        "label count {} does not match image count {}",
                        labels.len(),
                        images.count
                    ),
                });
            }
            Some(labels)
        }
        None => None,
    };
    let n = limit.map_or(images.count, |l| l.min(images.count));
    Ok((0..n)
        .map(|i| image_task(&images, i, labels.as_ref().map(|l| l[i])))
        .collect())
}

/// Serialize images back into the IDX layout.
pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for word in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend_from_slice(&[0, 255, 128, 1, 10, 20, 30, 40]);
        bytes
    }

    #[test]
    fn crafted_fixture_parses() {
        let imgs = parse_idx_images(&fixture()).unwrap();
        assert_eq!((imgs.count, imgs.rows, imgs.cols), (2, 2, 2));
        assert_eq!(imgs.image(1), &[10, 20, 30, 40]);
        assert_eq!(encode_idx_images(&imgs), fixture());
    }

    #[test]
    fn endpoints_scale_exactly() {
        let imgs = parse_idx_images(&fixture()).unwrap();
        let t = image_task(&imgs, 0, None);
        assert_eq!(t.ys[[0, 0]], 0.0);
        assert_eq!(t.ys[[1, 0]], 1.0);
        assert_eq!(t.xs.row(3).to_vec(), vec![1.0, 1.0]);
        assert_eq!(t.xs.row(1).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let mut bad = fixture();
        bad[3] = 1;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Idx { offset: 0, .. })));
        let short = &fixture()[..14];
        assert!(matches!(parse_idx_images(short), Err(Error::Idx { offset: 12, .. })));
        let payload_short = &fixture()[..20];
        assert!(matches!(
            parse_idx_images(payload_short),
            Err(Error::Idx { offset: 20, .. })
        ));
    }

    #[test]
    fn labels_round_trip() {
        let bytes = encode_idx_labels(&[3, 9]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![3, 9]);
    }
}
