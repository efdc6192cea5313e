//! IDX binary files (big-endian header, unsigned-byte payload).

use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw grayscale images as stored in an IDX3 file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        if self.rows * self.cols == 0 {
            0
        } else {
            self.pixels.len() / (self.rows * self.cols)
        }
    }
}

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset,
        message: message.into(),
    })
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => parse_err(offset, format!("truncated {} (file is {} bytes)", what, bytes.len())),
    }
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != IMAGES_MAGIC {
        return parse_err(0, format!("bad magic 0x{:08x}, expected 0x{:08x}", magic, IMAGES_MAGIC));
    }
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return parse_err(
            16 + payload.len(),
            format!("truncated pixel data: {} images of {}x{} need {} bytes, found {}", count, rows, cols, need, payload.len()),
        );
    }
    if payload.len() > need {
        return parse_err(16 + need, format!("{} trailing bytes after pixel data", payload.len() - need));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != LABELS_MAGIC {
        return parse_err(0, format!("bad magic 0x{:08x}, expected 0x{:08x}", magic, LABELS_MAGIC));
    }
    let count = read_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return parse_err(8 + payload.len(), format!("truncated labels: expected {}, found {}", count, payload.len()));
    }
    if payload.len() > count {
        return parse_err(8 + count, format!("{} trailing bytes after labels", payload.len() - count));
    }
    Ok(payload.to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn read_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    parse_images(&std::fs::read(path)?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_labels(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 2x3 images, hand-assembled.
    const IMAGES: &[u8] = &[
        0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, //
        0, 255, 128, 1, 2, 3, //
        9, 8, 7, 6, 5, 4,
    ];

    #[test]
    fn parses_hand_built_images() {
        let im = parse_images(IMAGES).unwrap();
        assert_eq!((im.rows, im.cols, im.count()), (2, 3, 2));
        assert_eq!(&im.pixels[..3], &[0, 255, 128]);
        assert_eq!(encode_images(&im), IMAGES);
    }

    #[test]
    fn positioned_errors() {
        let mut bad = IMAGES.to_vec();
        bad[3] = 1;
        assert!(matches!(parse_images(&bad), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_images(&IMAGES[..20]), Err(Error::Parse { offset: 20, .. })));
        assert!(matches!(parse_images(&IMAGES[..10]), Err(Error::Parse { offset: 8, .. })));
        assert!(matches!(parse_images(&[]), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_labels(&[0, 0, 8, 1, 0, 0, 0, 3, 1]), Err(Error::Parse { offset: 9, .. })));
        assert!(parse_labels(IMAGES).is_err());
        let mut long = encode_labels(&[1, 2]);
        long.push(0);
        assert!(matches!(parse_labels(&long), Err(Error::Parse { offset: 10, .. })));
    }
}
