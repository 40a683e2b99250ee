use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numgrad::Tensor;

/// `H × W × 3` image with channel-last layout and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape("image", format!("expected [H, W, 3], got {s:?}")));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    /// Clamps every value into `[0, 1]` instead of rejecting.
    pub fn from_clamped(pixels: Tensor) -> Result<Self> {
        Self::new(pixels.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{}x{} RGB needs {} bytes, got {}", width, height, width * height * 3, bytes.len()),
            ));
        }
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(Tensor::new(vec![height, width, 3], data)?)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Rounds to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.map(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for d in self.pixels.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.pixels.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    /// Largest absolute per-pixel difference.
    pub fn linf_distance(&self, other: &Image) -> f64 {
        self.pixels
            .data()
            .iter()
            .zip(other.pixels.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_channels() {
        assert!(Image::new(Tensor::full(&[2, 2, 3], 1.5)).is_err());
        assert!(Image::new(Tensor::full(&[2, 2, 4], 0.5)).is_err());
        assert!(Image::new(Tensor::full(&[2, 2, 3], 0.5)).is_ok());
    }

    #[test]
    fn rgb8_round_trip_is_exact_after_quantization() {
        let bytes: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let img = Image::from_rgb8(4, 4, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
        assert_eq!(img.quantized(), img);
    }
}
