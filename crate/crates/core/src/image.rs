//! Dense float image tensors plus the resampling and file helpers shared by
//! the encoders, generators, and CLI.
//!
//! Layout is row-major H x W x C with samples nominally in `[0, 1]`.

use std::io;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image buffer holds {} samples but {height}x{width}x{channels} needs {}",
                data.len(),
                height * width * channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite samples".into()));
        }
        Ok(())
    }

    /// Bilinear resample to `height x width` (half-pixel centers, edges clamped).
    /// A same-size resample reproduces the input exactly.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = vec![0.0; height * width * self.channels];
        for dy in 0..height {
            let (y0, y1, ty) = taps(self.height, height, dy);
            for dx in 0..width {
                let (x0, x1, tx) = taps(self.width, width, dx);
                for c in 0..self.channels {
                    let top = (1.0 - tx) * self.get(y0, x0, c) + tx * self.get(y0, x1, c);
                    let bottom = (1.0 - tx) * self.get(y1, x0, c) + tx * self.get(y1, x1, c);
                    data[(dy * width + dx) * self.channels + c] = (1.0 - ty) * top + ty * bottom;
                }
            }
        }
        ImageTensor { height, width, channels: self.channels, data }
    }
}

/// Sample taps for one output coordinate: indices of the two source rows or
/// columns and the interpolation weight on the second one.
fn taps(src: usize, dst: usize, i: usize) -> (usize, usize, f64) {
    if src == dst {
        return (i, i, 0.0);
    }
    let scale = src as f64 / dst as f64;
    let pos = (i as f64 + 0.5) * scale - 0.5;
    let floor = pos.floor();
    let t = pos - floor;
    let lo = floor.max(0.0) as usize;
    let hi = ((floor as isize + 1).max(0) as usize).min(src - 1);
    (lo.min(src - 1), hi, t)
}

/// Pullback of [`ImageTensor::resize_bilinear`]: scatters a cotangent on the
/// resized image back onto a source image of shape `src_h x src_w x channels`.
pub fn resize_bilinear_vjp(
    src_h: usize,
    src_w: usize,
    channels: usize,
    dst_h: usize,
    dst_w: usize,
    cotangent: &[f64],
) -> Vec<f64> {
    debug_assert_eq!(cotangent.len(), dst_h * dst_w * channels);
    let mut grad = vec![0.0; src_h * src_w * channels];
    for dy in 0..dst_h {
        let (y0, y1, ty) = taps(src_h, dst_h, dy);
        for dx in 0..dst_w {
            let (x0, x1, tx) = taps(src_w, dst_w, dx);
            for c in 0..channels {
                let g = cotangent[(dy * dst_w + dx) * channels + c];
                grad[(y0 * src_w + x0) * channels + c] += (1.0 - ty) * (1.0 - tx) * g;
                grad[(y0 * src_w + x1) * channels + c] += (1.0 - ty) * tx * g;
                grad[(y1 * src_w + x0) * channels + c] += ty * (1.0 - tx) * g;
                grad[(y1 * src_w + x1) * channels + c] += ty * tx * g;
            }
        }
    }
    grad
}

/// Load an image file (PNG or JPEG) as an RGB tensor with samples in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let decoded = image::open(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: io::Error::new(io::ErrorKind::InvalidData, e.to_string()),
    })?;
    let rgb = decoded.to_rgb8();
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    ImageTensor::new(height, width, 3, data)
}

/// Save an RGB tensor as PNG, clamping samples into `[0, 1]`.
pub fn save_image(tensor: &ImageTensor, path: &Path) -> Result<()> {
    if tensor.channels != 3 {
        return Err(Error::Shape(format!(
            "PNG export needs a 3-channel tensor, got {} channels",
            tensor.channels
        )));
    }
    let bytes: Vec<u8> = tensor
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buffer = image::RgbImage::from_raw(tensor.width as u32, tensor.height as u32, bytes)
        .expect("buffer length matches dimensions by construction");
    buffer.save(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: io::Error::new(io::ErrorKind::Other, e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_buffer_length() {
        assert!(matches!(
            ImageTensor::new(2, 2, 3, vec![0.0; 11]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn same_size_resample_is_identity() {
        let img = ImageTensor::from_fn(4, 4, 3, |y, x, c| (y * 16 + x * 3 + c) as f64 / 48.0);
        assert_eq!(img.resize_bilinear(4, 4), img);
    }

    #[test]
    fn factor_two_downsample_averages_two_by_two_blocks() {
        let img = ImageTensor::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f64);
        let half = img.resize_bilinear(2, 2);
        // Half-pixel centers land exactly between source pixels.
        assert_eq!(half.get(0, 0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(half.get(1, 1, 0), (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn resize_vjp_matches_transpose_of_forward() {
        // <resize(x), u> must equal <x, vjp(u)> for a linear map.
        let img = ImageTensor::from_fn(5, 3, 2, |y, x, c| (y as f64) - 0.3 * (x as f64) + 0.1 * c as f64);
        let resized = img.resize_bilinear(3, 4);
        let cot: Vec<f64> = (0..resized.as_slice().len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let grad = resize_bilinear_vjp(5, 3, 2, 3, 4, &cot);
        let lhs: f64 = resized.as_slice().iter().zip(&cot).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.as_slice().iter().zip(&grad).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ImageTensor::from_fn(8, 6, 3, |y, x, c| {
            ((y * 31 + x * 17 + c * 97) % 256) as f64 / 255.0
        });
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.height(), 8);
        assert_eq!(back.width(), 6);
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1.0 / 510.0);
        }
    }
}
