//! In-memory image representation and content fingerprinting.
//!
//! Pixels are `f64` in `[0,1]`, stored row-major as height x width x
//! channels. Keys bind to the 8-bit quantization of the pixel content, not
//! to file names, so re-encoding the same picture yields the same
//! fingerprint.

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major h*w*c values in [0,1].
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels, "pixel buffer size");
        Self { height, width, channels, data }
    }

    /// Flat single-row image wrapping a raw vector; the working shape for
    /// desk-scale backends whose codec is the identity map.
    pub fn flat(data: Vec<f64>) -> Self {
        let n = data.len();
        Self { height: 1, width: n, channels: 1, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Pixel content quantized to 8-bit, the byte stream keys bind to.
    pub fn quantized_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Hex SHA-256 of the quantized pixel bytes plus dimensions.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update((self.channels as u64).to_le_bytes());
        hasher.update(self.quantized_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(vec![self.height, self.width, self.channels], self.data.clone())
            .expect("image buffer matches its shape")
    }

    pub fn from_array(values: &ArrayD<f64>) -> Self {
        let shape = values.shape();
        let (h, w, c) = match shape.len() {
            3 => (shape[0], shape[1], shape[2]),
            1 => (1, shape[0], 1),
            _ => (1, values.len(), 1),
        };
        Self { height: h, width: w, channels: c, data: values.iter().cloned().collect() }
    }
}
