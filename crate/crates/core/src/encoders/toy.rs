//! Deterministic toy encoders.
//!
//! These stand in for large pretrained models so the whole adaptation loop
//! runs hermetically: no weight files, bitwise-reproducible outputs given a
//! seed, and exact pullbacks for gradient flow. The semantic encoder
//! downsamples to a small grayscale plane and applies a seeded orthonormal
//! projection; text goes through a byte-bigram hash histogram and a seeded
//! projection into the same space. The structure encoder mean-pools
//! non-overlapping patches and maps each pooled color through a seeded
//! linear layer, normalizing every token.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::{resize_bilinear_vjp, ImageTensor};
use crate::rng::substream;
use crate::vecmath::{matvec, matvec_transpose, norm, normalize_vjp};

use super::{EmbeddingVector, EncoderDescriptor, PatchTokenGrid, SemanticEncoder, StructureEncoder};

/// Number of hash buckets in the text bigram histogram.
pub const TEXT_BINS: usize = 256;

const DEFAULT_SEMANTIC_DIM: usize = 64;
const DEFAULT_SEMANTIC_RESOLUTION: (usize, usize) = (16, 16);
const DEFAULT_TOKEN_DIM: usize = 32;
const DEFAULT_PATCH_RESOLUTION: (usize, usize) = (32, 32);
const DEFAULT_PATCH_SIZE: usize = 8;

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let g: f64 = rng.sample(StandardNormal);
            g * scale
        })
        .collect()
}

/// Seeded rows orthonormalized by modified Gram-Schmidt. Requires
/// `rows <= cols`; a random Gaussian matrix of that shape has full rank, so
/// the pivots never collapse in practice.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    assert!(rows <= cols, "cannot orthonormalize {rows} rows of length {cols}");
    let mut m = gaussian_matrix(rng, rows, cols, 1.0);
    for r in 0..rows {
        for p in 0..r {
            let mut proj = 0.0;
            for c in 0..cols {
                proj += m[r * cols + c] * m[p * cols + c];
            }
            for c in 0..cols {
                m[r * cols + c] -= proj * m[p * cols + c];
            }
        }
        let mut n = 0.0;
        for c in 0..cols {
            n += m[r * cols + c] * m[r * cols + c];
        }
        let n = n.sqrt();
        for c in 0..cols {
            m[r * cols + c] /= n;
        }
    }
    m
}

/// Hash a two-byte window into a histogram bucket (FNV-1a).
fn bigram_bucket(a: u8, b: u8) -> usize {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in [a, b] {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    (h % TEXT_BINS as u64) as usize
}

/// Byte-bigram histogram with start/end sentinels so one-character prompts
/// still produce mass.
fn ngram_histogram(prompt: &str) -> Vec<f64> {
    let mut padded = Vec::with_capacity(prompt.len() + 2);
    padded.push(0x02u8);
    padded.extend_from_slice(prompt.as_bytes());
    padded.push(0x03u8);
    let mut hist = vec![0.0; TEXT_BINS];
    for w in padded.windows(2) {
        hist[bigram_bucket(w[0], w[1])] += 1.0;
    }
    hist
}

pub struct ToySemanticEncoder {
    descriptor: EncoderDescriptor,
    /// Row-major `semantic_dim x (res_h * res_w)`, orthonormal rows.
    image_projection: Vec<f64>,
    /// Row-major `semantic_dim x TEXT_BINS`.
    text_projection: Vec<f64>,
}

impl ToySemanticEncoder {
    /// The standard toy configuration: 16x16 grayscale plane projected to a
    /// 64-dimensional embedding.
    pub fn seeded(seed: u64) -> Self {
        Self::with_dims(seed, DEFAULT_SEMANTIC_DIM, DEFAULT_SEMANTIC_RESOLUTION)
    }

    pub fn with_dims(seed: u64, semantic_dim: usize, resolution: (usize, usize)) -> Self {
        let plane = resolution.0 * resolution.1;
        assert!(semantic_dim <= plane, "projection needs semantic_dim <= {plane}");
        let mut image_rng = substream(seed, "toy-semantic/image-projection");
        let image_projection = orthonormal_rows(&mut image_rng, semantic_dim, plane);
        let mut text_rng = substream(seed, "toy-semantic/text-projection");
        let text_projection =
            gaussian_matrix(&mut text_rng, semantic_dim, TEXT_BINS, 1.0 / (TEXT_BINS as f64).sqrt());
        Self {
            descriptor: EncoderDescriptor {
                name: super::TOY_SEMANTIC.into(),
                semantic_dim,
                token_dim: semantic_dim,
                input_resolution: resolution,
                value_range: (0.0, 1.0),
            },
            image_projection,
            text_projection,
        }
    }

    /// Identity image projection on the flattened grayscale plane; handy for
    /// tests where the embedding should be readable off the pixels.
    pub fn identity(seed: u64, resolution: (usize, usize)) -> Self {
        let plane = resolution.0 * resolution.1;
        let mut image_projection = vec![0.0; plane * plane];
        for i in 0..plane {
            image_projection[i * plane + i] = 1.0;
        }
        let mut text_rng = substream(seed, "toy-semantic/text-projection");
        let text_projection =
            gaussian_matrix(&mut text_rng, plane, TEXT_BINS, 1.0 / (TEXT_BINS as f64).sqrt());
        Self {
            descriptor: EncoderDescriptor {
                name: "toy-semantic-identity".into(),
                semantic_dim: plane,
                token_dim: plane,
                input_resolution: resolution,
                value_range: (0.0, 1.0),
            },
            image_projection,
            text_projection,
        }
    }

    /// Resample, map into the value range, and collapse to one grayscale
    /// plane (channel mean). Returns the flattened plane.
    fn grayscale_plane(&self, image: &ImageTensor) -> Vec<f64> {
        let (rh, rw) = self.descriptor.input_resolution;
        let resized = image.resize_bilinear(rh, rw);
        let (lo, hi) = self.descriptor.value_range;
        let span = hi - lo;
        let channels = resized.channels();
        let mut plane = Vec::with_capacity(rh * rw);
        for y in 0..rh {
            for x in 0..rw {
                let mut acc = 0.0;
                for c in 0..channels {
                    acc += lo + span * resized.get(y, x, c);
                }
                plane.push(acc / channels as f64);
            }
        }
        plane
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        image.ensure_finite()?;
        if image.channels() != 3 {
            return Err(Error::Shape(format!(
                "toy semantic encoder expects 3-channel images, got {}",
                image.channels()
            )));
        }
        Ok(())
    }
}

impl SemanticEncoder for ToySemanticEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn embed_image(&self, image: &ImageTensor) -> Result<EmbeddingVector> {
        self.check_image(image)?;
        let plane = self.grayscale_plane(image);
        let projected = matvec(
            &self.image_projection,
            &plane,
            self.descriptor.semantic_dim,
            plane.len(),
        );
        EmbeddingVector::unit(projected)
    }

    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVector> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must not be empty".into()));
        }
        let hist = ngram_histogram(prompt);
        let projected = matvec(&self.text_projection, &hist, self.descriptor.semantic_dim, TEXT_BINS);
        EmbeddingVector::unit(projected)
    }

    fn embed_image_vjp(&self, image: &ImageTensor, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let d = self.descriptor.semantic_dim;
        if cotangent.len() != d {
            return Err(Error::Shape(format!(
                "cotangent has {} entries, embedding has {d}",
                cotangent.len()
            )));
        }
        let (rh, rw) = self.descriptor.input_resolution;
        let plane = self.grayscale_plane(image);
        let pre_norm = matvec(&self.image_projection, &plane, d, plane.len());
        let n = norm(&pre_norm);
        if n < 1e-12 {
            return Err(Error::InvalidInput(
                "cannot differentiate through an (almost) zero embedding".into(),
            ));
        }
        let unit: Vec<f64> = pre_norm.iter().map(|v| v / n).collect();
        let d_pre = normalize_vjp(&pre_norm, &unit, cotangent);
        let d_plane = matvec_transpose(&self.image_projection, &d_pre, d, plane.len());
        // Undo grayscale (spread across channels) and the value-range map.
        let span = self.descriptor.value_range.1 - self.descriptor.value_range.0;
        let channels = image.channels();
        let mut d_resized = Vec::with_capacity(rh * rw * channels);
        for &g in &d_plane {
            let per_channel = g * span / channels as f64;
            for _ in 0..channels {
                d_resized.push(per_channel);
            }
        }
        Ok(resize_bilinear_vjp(
            image.height(),
            image.width(),
            channels,
            rh,
            rw,
            &d_resized,
        ))
    }
}

pub struct ToyPatchEncoder {
    descriptor: EncoderDescriptor,
    patch_size: usize,
    /// Row-major `token_dim x 3` map from pooled patch color to token.
    token_map: Vec<f64>,
}

impl ToyPatchEncoder {
    /// The standard toy configuration: 32x32 input, 8x8 patches, so a 4x4
    /// grid of 32-dimensional tokens.
    pub fn seeded(seed: u64) -> Self {
        Self::with_dims(seed, DEFAULT_TOKEN_DIM, DEFAULT_PATCH_RESOLUTION, DEFAULT_PATCH_SIZE)
    }

    pub fn with_dims(seed: u64, token_dim: usize, resolution: (usize, usize), patch_size: usize) -> Self {
        assert!(patch_size > 0, "patch size must be positive");
        assert!(
            resolution.0 % patch_size == 0 && resolution.1 % patch_size == 0,
            "resolution {resolution:?} must be divisible by patch size {patch_size}"
        );
        let mut rng = substream(seed, "toy-patch/token-map");
        let token_map = gaussian_matrix(&mut rng, token_dim, 3, 1.0 / (3.0f64).sqrt());
        Self {
            descriptor: EncoderDescriptor {
                name: super::TOY_PATCH.into(),
                semantic_dim: token_dim,
                token_dim,
                input_resolution: resolution,
                value_range: (0.0, 1.0),
            },
            patch_size,
            token_map,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (
            self.descriptor.input_resolution.0 / self.patch_size,
            self.descriptor.input_resolution.1 / self.patch_size,
        )
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        image.ensure_finite()?;
        if image.channels() != 3 {
            return Err(Error::Shape(format!(
                "toy patch encoder expects 3-channel images, got {}",
                image.channels()
            )));
        }
        Ok(())
    }

    /// Per-patch mean color after resampling and range mapping: one RGB
    /// triple per grid position.
    fn pooled_colors(&self, image: &ImageTensor) -> Vec<[f64; 3]> {
        let (rh, rw) = self.descriptor.input_resolution;
        let resized = image.resize_bilinear(rh, rw);
        let (lo, hi) = self.descriptor.value_range;
        let span = hi - lo;
        let (gh, gw) = self.grid_shape();
        let area = (self.patch_size * self.patch_size) as f64;
        let mut pooled = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut mean = [0.0; 3];
                for py in 0..self.patch_size {
                    for px in 0..self.patch_size {
                        let y = gy * self.patch_size + py;
                        let x = gx * self.patch_size + px;
                        for c in 0..3 {
                            mean[c] += lo + span * resized.get(y, x, c);
                        }
                    }
                }
                for m in &mut mean {
                    *m /= area;
                }
                pooled.push(mean);
            }
        }
        pooled
    }
}

impl StructureEncoder for ToyPatchEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    fn encode_patches(&self, image: &ImageTensor) -> Result<PatchTokenGrid> {
        self.check_image(image)?;
        let (gh, gw) = self.grid_shape();
        let d = self.descriptor.token_dim;
        let mut tokens = Vec::with_capacity(gh * gw * d);
        for mean in self.pooled_colors(image) {
            let pre = matvec(&self.token_map, &mean, d, 3);
            let n = norm(&pre);
            if n < 1e-12 {
                return Err(Error::InvalidInput(
                    "patch pooled to an (almost) zero token; cannot normalize".into(),
                ));
            }
            tokens.extend(pre.iter().map(|v| v / n));
        }
        PatchTokenGrid::new(tokens, d, gh, gw)
    }

    fn encode_patches_vjp(&self, image: &ImageTensor, cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let (gh, gw) = self.grid_shape();
        let d = self.descriptor.token_dim;
        if cotangent.len() != gh * gw * d {
            return Err(Error::Shape(format!(
                "cotangent has {} entries, grid has {}",
                cotangent.len(),
                gh * gw * d
            )));
        }
        let (rh, rw) = self.descriptor.input_resolution;
        let span = self.descriptor.value_range.1 - self.descriptor.value_range.0;
        let area = (self.patch_size * self.patch_size) as f64;
        let mut d_resized = vec![0.0; rh * rw * 3];
        for (p, mean) in self.pooled_colors(image).into_iter().enumerate() {
            let pre = matvec(&self.token_map, &mean, d, 3);
            let n = norm(&pre);
            if n < 1e-12 {
                return Err(Error::InvalidInput(
                    "patch pooled to an (almost) zero token; cannot differentiate".into(),
                ));
            }
            let unit: Vec<f64> = pre.iter().map(|v| v / n).collect();
            let d_pre = normalize_vjp(&pre, &unit, &cotangent[p * d..(p + 1) * d]);
            let d_mean = matvec_transpose(&self.token_map, &d_pre, d, 3);
            let gy = p / gw;
            let gx = p % gw;
            for py in 0..self.patch_size {
                for px in 0..self.patch_size {
                    let y = gy * self.patch_size + py;
                    let x = gx * self.patch_size + px;
                    for c in 0..3 {
                        d_resized[(y * rw + x) * 3 + c] += d_mean[c] * span / area;
                    }
                }
            }
        }
        Ok(resize_bilinear_vjp(
            image.height(),
            image.width(),
            3,
            rh,
            rw,
            &d_resized,
        ))
    }
}
