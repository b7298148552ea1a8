//! Big-endian IDX files as distributed with MNIST.

use std::path::Path;

use super::{io_err, DataError, ImageStack, LabeledImageSet, Labels, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(DataError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }

    fn u32(&mut self) -> Result<u32> {
        match self.bytes.get(self.pos..self.pos + 4) {
            Some(b) => {
                self.pos += 4;
                Ok(u32::from_be_bytes(b.try_into().unwrap()))
            }
            None => self.fail("unexpected end of file in header"),
        }
    }

    fn magic(&mut self, want: u32) -> Result<()> {
        let got = self.u32()?;
        if got != want {
            self.pos -= 4;
            return self.fail(format!("magic {got:#010x}, expected {want:#010x}"));
        }
        Ok(())
    }

    fn body(&mut self, len: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if avail < len {
            self.pos = self.bytes.len();
            return self.fail(format!("truncated: {len} payload bytes declared, {avail} present"));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        if self.pos != self.bytes.len() {
            return self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(out)
    }
}

/// Parses an image file; pixels are scaled from bytes to `[0, 1]`.
pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<ImageStack> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    if h == 0 || w == 0 {
        return r.fail(format!("zero image extent {h}x{w}"));
    }
    let body = r.body(n * h * w)?;
    ImageStack::new(n, h, w, body.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(LABEL_MAGIC)?;
    let n = r.u32()? as usize;
    Ok(r.body(n)?.to_vec())
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledImageSet> {
    let ib = std::fs::read(images).map_err(io_err(images))?;
    let lb = std::fs::read(labels).map_err(io_err(labels))?;
    let stack = parse_images(images, &ib)?;
    let labels_v = parse_labels(labels, &lb)?;
    LabeledImageSet::new(stack, Labels::Single(labels_v))
}

/// Encodes images (rounded to bytes) as an IDX image file.
pub fn encode_images(images: &ImageStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.data.len());
    for v in [IMAGE_MAGIC, images.n as u32, images.h as u32, images.w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn round_trip() {
        let imgs = ImageStack::new(2, 2, 3, vec![0.0, 1.0, 0.5, 0.2, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let back = parse_images(p(), &encode_images(&imgs)).unwrap();
        assert_eq!((back.n, back.h, back.w), (2, 2, 3));
        assert_eq!(back.data[2], 128.0 / 255.0);
        assert_eq!(parse_labels(p(), &encode_labels(&[3, 7])).unwrap(), vec![3, 7]);
    }

    #[test]
    fn wrong_magic_reports_offset_zero() {
        let mut b = encode_labels(&[1]);
        b[3] = 0x03;
        match parse_labels(p(), &b) {
            Err(DataError::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        // image parser rejects a label file
        assert!(parse_images(p(), &encode_labels(&[1])).is_err());
    }

    #[test]
    fn empty_and_truncated_files() {
        assert!(matches!(parse_images(p(), &[]), Err(DataError::Format { offset: 0, .. })));
        let imgs = ImageStack::zeros(3, 4, 4);
        let mut b = encode_images(&imgs);
        b.truncate(b.len() - 5);
        assert!(matches!(parse_images(p(), &b), Err(DataError::Format { .. })));
    }
}
