//! IDX image/label files (big-endian, the EMNIST/MNIST container format).
//!
//! Images: magic 0x00000803, u32 count/rows/cols, then u8 pixels. Labels:
//! magic 0x00000801, u32 count, then u8 labels. Pixels map linearly onto
//! `[0, 1]` (0 -> 0.0, 255 -> 1.0).

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

use super::Dataset;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(reader: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::IdxTruncated(format!("while reading {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Parse an IDX image/label file pair into a dataset.
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<S>> {
    let mut img = std::io::BufReader::new(std::fs::File::open(images_path)?);
    let magic = read_u32(&mut img, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadIdxMagic { got: magic, expected: IMAGE_MAGIC });
    }
    let count = read_u32(&mut img, "image count")? as usize;
    let rows = read_u32(&mut img, "image rows")? as usize;
    let cols = read_u32(&mut img, "image cols")? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    img.read_exact(&mut pixels)
        .map_err(|_| Error::IdxTruncated("image payload".into()))?;

    let mut lab = std::io::BufReader::new(std::fs::File::open(labels_path)?);
    let magic = read_u32(&mut lab, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadIdxMagic { got: magic, expected: LABEL_MAGIC });
    }
    let label_count = read_u32(&mut lab, "label count")? as usize;
    if label_count != count {
        return Err(Error::IdxCountMismatch { images: count, labels: label_count });
    }
    let mut labels = vec![0u8; label_count];
    lab.read_exact(&mut labels)
        .map_err(|_| Error::IdxTruncated("label payload".into()))?;

    let num_classes = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    let scale = 1.0 / 255.0;
    let samples = (0..count)
        .map(|i| {
            let values = pixels[i * rows * cols..(i + 1) * rows * cols]
                .iter()
                .map(|&b| c::<S>(b as f64 * scale))
                .collect();
            (
                Tensor::from_parts(vec![1, rows, cols], values),
                labels[i] as usize,
            )
        })
        .collect();
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, num_classes, samples)
}

/// Write a dataset as an IDX pair. Features must be `[1, rows, cols]`;
/// values are clamped to `[0, 1]` and quantized to bytes.
pub fn save_idx<S: Scalar>(ds: &Dataset<S>, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = ds
        .feature_shape()
        .ok_or_else(|| Error::EmptyDataset("cannot save an empty dataset".into()))?;
    let (rows, cols) = match shape {
        [1, r, c] => (*r, *c),
        other => {
            return Err(Error::ShapeMismatch {
                expected: "[1, rows, cols]".into(),
                got: format!("{other:?}"),
            })
        }
    };
    if ds.num_classes > 256 {
        return Err(Error::InvalidArgument {
            name: "num_classes",
            reason: "IDX labels are single bytes".into(),
        });
    }
    let mut img: Vec<u8> = Vec::with_capacity(16 + ds.len() * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lab: Vec<u8> = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for (t, label) in ds.samples() {
        for v in t.values() {
            let x = v.as_f64().clamp(0.0, 1.0);
            img.push((x * 255.0).round() as u8);
        }
        lab.push(*label as u8);
    }
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lab)?;
    Ok(())
}
