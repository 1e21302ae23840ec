//! IDX image and label files (big-endian, magic-checked).

use std::path::Path;

use super::{digest_bytes, read_file, Dataset, DatasetKind, Features, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(path, None, "truncated header"))
}

/// Images as `[n, rows, cols]` bytes.
pub fn read_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::parse(path, None, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::parse(
            path,
            None,
            format!("length mismatch: header declares {n}x{rows}x{cols} pixels, file has {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn read_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::parse(path, None, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::parse(
            path,
            None,
            format!("length mismatch: header declares {n} labels, file has {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

pub fn write_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// A grid dataset `[n, 1, rows, cols]` with pixels scaled to [0, 1], keeping
/// at most `limit` images. No splits are assigned.
fn idx_dataset(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<(Tensor, Vec<usize>, String)> {
    let ib = read_file(images_path)?;
    let lb = read_file(labels_path)?;
    let (n, rows, cols, pixels) = read_idx_images(&ib, images_path)?;
    let labels = read_idx_labels(&lb, labels_path)?;
    if labels.len() != n {
        return Err(Error::parse(
            labels_path,
            None,
            format!("length mismatch: {n} images but {} labels", labels.len()),
        ));
    }
    let keep = limit.map_or(n, |l| l.min(n));
    if keep == 0 {
        return Err(Error::parse(images_path, None, "no images"));
    }
    let data = pixels[..keep * rows * cols].iter().map(|&p| p as f64 / 255.0).collect();
    let x = Tensor::new(vec![keep, 1, rows, cols], data)?;
    let y: Vec<usize> = labels[..keep].iter().map(|&l| l as usize).collect();
    if let Some(bad) = y.iter().find(|&&l| l > 9) {
        return Err(Error::parse(labels_path, None, format!("label {bad} outside 0..9")));
    }
    let digest = digest_bytes([b"idx-v1".as_slice(), &ib, &lb, &(keep as u64).to_le_bytes()]);
    Ok((x, y, digest))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (x, y, digest) = idx_dataset(images_path, labels_path, None)?;
    let n = y.len();
    let mut d = Dataset::new(
        DatasetKind::Grid,
        Features::Dense(x),
        y,
        None,
        10,
        Provenance {
            source: images_path.display().to_string(),
            digest,
        },
    )?;
    d.splits.insert("train".into(), (0..n).collect());
    Ok(d)
}

/// The four standard files of a directory, keeping the first `train_limit`
/// training images and all test images.
pub fn load_mnist_dir(dir: &Path, train_limit: Option<usize>) -> Result<Dataset> {
    let (xtr, ytr, dtr) = idx_dataset(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        train_limit,
    )?;
    let (xte, yte, dte) = idx_dataset(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        None,
    )?;
    let (ntr, nte) = (ytr.len(), yte.len());
    let x = Tensor::concat_rows(&[xtr, xte])?;
    let y = ytr.into_iter().chain(yte).collect();
    let mut d = Dataset::new(
        DatasetKind::Grid,
        Features::Dense(x),
        y,
        None,
        10,
        Provenance {
            source: dir.display().to_string(),
            digest: digest_bytes([dtr.as_bytes(), dte.as_bytes()]),
        },
    )?;
    d.splits.insert("train".into(), (0..ntr).collect());
    d.splits.insert("test".into(), (ntr..ntr + nte).collect());
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_header() {
        let bytes = write_idx_images(2, 3, 3, &[7; 18]);
        let (n, r, c, px) = read_idx_images(&bytes, Path::new("mem")).unwrap();
        assert_eq!((n, r, c, px.len()), (2, 3, 3, 18));
        assert!(read_idx_labels(&bytes, Path::new("mem")).is_err());
        let l = write_idx_labels(&[1, 2]);
        assert_eq!(read_idx_labels(&l, Path::new("mem")).unwrap(), vec![1, 2]);
        assert!(read_idx_images(&bytes[..20], Path::new("mem")).is_err());
    }
}
