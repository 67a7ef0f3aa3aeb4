//! IDX files: big-endian header, `u8` payload.

use std::fs;
use std::path::Path;

use super::{DataKind, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

fn check_magic(bytes: &[u8], want: u32, what: &str) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != want {
        return Err(Error::format(
            0,
            format!("{what}: magic {magic:#010x}, expected {want:#010x}"),
        ));
    }
    Ok(())
}

/// Parses an image file: `(count, rows, cols, pixel bytes)`.
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IMAGE_MAGIC, "image file")?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::format(
            (16 + payload.len()) as u64,
            format!("image payload truncated: {need} bytes expected, {} present", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format(
            (16 + need) as u64,
            format!("{} trailing bytes after image payload", payload.len() - need),
        ));
    }
    Ok((n, rows, cols, payload))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABEL_MAGIC, "label file")?;
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            (8 + payload.len().min(n)) as u64,
            format!("label payload has {} bytes, header says {n}", payload.len()),
        ));
    }
    Ok(payload)
}

/// Loads an MNIST image/label file pair. Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;
    let (n, rows, cols, pixels) = read_idx_images(&img)?;
    let labels = read_idx_labels(&lab)?;
    if labels.len() != n {
        return Err(Error::format(
            4,
            format!("image file holds {n} examples, label file {}", labels.len()),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(Error::format((8 + pos) as u64, format!("label {} outside 0..=9", labels[pos])));
    }
    if n == 0 {
        return Err(Error::format(4, "empty image file"));
    }
    let data: Vec<f32> = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![n, rows * cols], data)?,
        labels.iter().map(|&l| usize::from(l)).collect(),
        10,
        DataKind::Image { height: rows, width: cols },
    )
}

/// Serializes image rows back to IDX bytes (pixels rounded from `[0, 1]`).
pub fn write_idx_images(dataset: &Dataset) -> Result<Vec<u8>> {
    let DataKind::Image { height, width } = dataset.kind else {
        return Err(Error::Config("write_idx_images needs an image dataset".into()));
    };
    let mut out = Vec::with_capacity(16 + dataset.inputs.numel());
    for v in [IMAGE_MAGIC, dataset.len() as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(
        dataset
            .inputs
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

pub fn write_idx_labels(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + dataset.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    out.extend(dataset.labels.iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_file(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        b
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut b = LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write_pair(dir: &Path, img: &[u8], lab: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (i, l) = (dir.join("img"), dir.join("lab"));
        fs::write(&i, img).unwrap();
        fs::write(&l, lab).unwrap();
        (i, l)
    }

    #[test]
    fn saturated_image_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = write_pair(dir.path(), &image_file(1, 28, 28, 255), &label_file(&[7]));
        let d = load_mnist_idx(i, l).unwrap();
        assert_eq!(d.inputs.shape(), &[1, 784]);
        assert!(d.inputs.data().iter().all(|&v| v == 1.0));
        assert_eq!(d.labels, vec![7]);
    }

    #[test]
    fn label_file_with_image_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = image_file(1, 2, 2, 0);
        let (i, l) = write_pair(dir.path(), &img, &img);
        match load_mnist_idx(i, l) {
            Err(Error::Format { offset: 0, message }) => assert!(message.contains("0x00000803")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_count_mismatch_name_offsets() {
        let mut img = image_file(2, 2, 2, 9);
        img.pop();
        assert!(matches!(read_idx_images(&img), Err(Error::Format { offset: 23, .. })));
        assert!(matches!(read_idx_images(&img[..10]), Err(Error::Format { offset: 8, .. })));

        let dir = tempfile::tempdir().unwrap();
        let (i, l) = write_pair(dir.path(), &image_file(2, 2, 2, 9), &label_file(&[1]));
        assert!(matches!(load_mnist_idx(i, l), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn pixel_bytes_round_trip(pixels in proptest::collection::vec(any::<u8>(), 12), labels in proptest::collection::vec(0u8..10, 3)) {
            let mut img = Vec::new();
            for v in [IMAGE_MAGIC, 3, 2, 2] {
                img.extend_from_slice(&v.to_be_bytes());
            }
            img.extend_from_slice(&pixels);
            let lab = label_file(&labels);
            let dir = tempfile::tempdir().unwrap();
            let (i, l) = write_pair(dir.path(), &img, &lab);
            let d = load_mnist_idx(i, l).unwrap();
            prop_assert_eq!(write_idx_images(&d).unwrap(), img);
            prop_assert_eq!(write_idx_labels(&d), lab);
        }
    }
}
