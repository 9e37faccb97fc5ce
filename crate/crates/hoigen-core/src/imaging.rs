//! Decoded image representation and deterministic PNG encoding.

use crate::error::{Error, Result};
use ndarray::Array3;
use sha2::{Digest, Sha256};

/// An decoded RGB image with float channels in `[0, 1]`, shape `(h, w, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    data: Array3<f64>,
}

impl PixelImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (_, _, c) = data.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image needs 3 channels, got {c}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::ValueOutOfRange("non-finite pixel value".into()));
        }
        Ok(Self {
            data: data.mapv(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Quantize to 8-bit RGB. Rounding is half-up, so encoding is
    /// reproducible bit-for-bit for identical float inputs.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.data.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.data[[y as usize, x as usize, c]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        self.to_rgb8()
            .write_to(
                &mut std::io::Cursor::new(&mut bytes),
                image::ImageFormat::Png,
            )
            .map_err(|e| Error::BackboneFailure(format!("png encode: {e}")))?;
        Ok(bytes)
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
            img.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0
        });
        Self::new(data)
    }

    /// Mean luminance (Rec. 601 weights), used by the synthetic keypoint
    /// backend and a few tests.
    pub fn luminance(&self) -> ndarray::Array2<f64> {
        let (h, w, _) = self.data.dim();
        ndarray::Array2::from_shape_fn((h, w), |(i, j)| {
            0.299 * self.data[[i, j, 0]] + 0.587 * self.data[[i, j, 1]] + 0.114 * self.data[[i, j, 2]]
        })
    }
}

/// Hex-encoded SHA-256 of a byte slice. Used for run ids, VLM cache keys
/// and artifact digests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// FNV-1a 64-bit hash. Stable across platforms; seeds the deterministic
/// token embeddings of the toy backbone and the hash embedder.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn png_encoding_is_deterministic() {
        let img = PixelImage::new(Array3::from_elem((4, 4, 3), 0.5)).unwrap();
        assert_eq!(img.encode_png().unwrap(), img.encode_png().unwrap());
    }

    #[test]
    fn rejects_bad_channel_count() {
        assert!(PixelImage::new(Array3::zeros((4, 4, 4))).is_err());
    }

    #[test]
    fn fnv_is_stable() {
        // Reference value for "a" from the FNV-1a specification.
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
