//! Encoder interfaces.
//!
//! Two encoder roles feed the adaptation losses: a *semantic* encoder mapping
//! images and text prompts into one joint embedding space, and a *structure*
//! encoder producing a grid of patch tokens per image. Deterministic toy
//! implementations (see [`toy`]) make the whole pipeline hermetic; adapters
//! for weight-backed encoders are declared in the registry but need external
//! weight files and are not built into this crate.

pub mod toy;

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::vecmath;

pub use toy::{ToyPatchEncoder, ToySemanticEncoder};

/// Static description of an encoder: dimensions, expected input resolution,
/// and the value range its inputs are mapped into.
///
/// `semantic_dim` is the length of flat embeddings from `embed_image` /
/// `embed_text`; `token_dim` is the per-token length from `encode_patches`.
/// An encoder that serves only one of the two roles sets both fields to the
/// dimension of the role it serves.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDescriptor {
    pub name: String,
    pub semantic_dim: usize,
    pub token_dim: usize,
    pub input_resolution: (usize, usize),
    pub value_range: (f64, f64),
}

impl EncoderDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.semantic_dim == 0 || self.token_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "encoder '{}' has a zero dimension",
                self.name
            )));
        }
        if self.input_resolution.0 == 0 || self.input_resolution.1 == 0 {
            return Err(Error::InvalidInput(format!(
                "encoder '{}' has a zero input resolution",
                self.name
            )));
        }
        if !(self.value_range.0 < self.value_range.1)
            || !self.value_range.0.is_finite()
            || !self.value_range.1.is_finite()
        {
            return Err(Error::InvalidInput(format!(
                "encoder '{}' has an empty or non-finite value range",
                self.name
            )));
        }
        Ok(())
    }
}

/// A unit-norm embedding in the joint image-text space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Wrap raw values without normalizing. Rejects empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("embedding must not be empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    /// Normalize `values` to unit L2 norm. A near-zero input has no direction
    /// and is rejected.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let v = Self::new(values)?;
        let n = vecmath::norm(&v.values);
        if n < 1e-12 {
            return Err(Error::InvalidInput(
                "cannot normalize an (almost) zero embedding".into(),
            ));
        }
        let values = v.values.iter().map(|x| x / n).collect();
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        vecmath::norm(&self.values)
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        vecmath::cosine(&self.values, &other.values)
    }
}

/// A grid of per-patch tokens, row-major `position_count() x token_dim`.
/// Encoder outputs have unit-norm rows; the constructor itself only checks
/// shape and finiteness so that loss-side tests can build arbitrary grids.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokenGrid {
    tokens: Vec<f64>,
    token_dim: usize,
    grid_height: usize,
    grid_width: usize,
}

impl PatchTokenGrid {
    pub fn new(tokens: Vec<f64>, token_dim: usize, grid_height: usize, grid_width: usize) -> Result<Self> {
        if token_dim == 0 || grid_height == 0 || grid_width == 0 {
            return Err(Error::InvalidInput(
                "patch grid needs positive token dimension and grid extents".into(),
            ));
        }
        if tokens.len() != token_dim * grid_height * grid_width {
            return Err(Error::Shape(format!(
                "token buffer holds {} values but a {grid_height}x{grid_width} grid of {token_dim}-d tokens needs {}",
                tokens.len(),
                token_dim * grid_height * grid_width
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("patch grid contains non-finite values".into()));
        }
        Ok(Self { tokens, token_dim, grid_height, grid_width })
    }

    pub fn position_count(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn grid_height(&self) -> usize {
        self.grid_height
    }

    pub fn grid_width(&self) -> usize {
        self.grid_width
    }

    pub fn token(&self, position: usize) -> &[f64] {
        &self.tokens[position * self.token_dim..(position + 1) * self.token_dim]
    }

    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    /// Largest deviation of any row norm from 1; encoder outputs keep this
    /// within 1e-6.
    pub fn max_row_norm_deviation(&self) -> f64 {
        (0..self.position_count())
            .map(|i| (vecmath::norm(self.token(i)) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Joint image-text embedding surface. Implementations are pure and
/// read-only after construction, so shared references are safe across
/// threads.
pub trait SemanticEncoder: Send + Sync {
    fn descriptor(&self) -> &EncoderDescriptor;

    fn embed_image(&self, image: &ImageTensor) -> Result<EmbeddingVector>;

    /// Empty prompts are rejected.
    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVector>;

    /// Pullback of [`Self::embed_image`]: maps a cotangent on the embedding
    /// to a gradient on the input pixels (flat H x W x C of `image`).
    fn embed_image_vjp(&self, image: &ImageTensor, cotangent: &[f64]) -> Result<Vec<f64>>;
}

/// Patch-token surface used by the structure loss.
pub trait StructureEncoder: Send + Sync {
    fn descriptor(&self) -> &EncoderDescriptor;

    fn encode_patches(&self, image: &ImageTensor) -> Result<PatchTokenGrid>;

    /// Pullback of [`Self::encode_patches`]: `cotangent` is a flat
    /// `position_count x token_dim` buffer; the result is a gradient on the
    /// input pixels.
    fn encode_patches_vjp(&self, image: &ImageTensor, cotangent: &[f64]) -> Result<Vec<f64>>;
}

/// Token layer adapters export by default: the final transformer block's
/// output tokens (excluding any class token). The toy encoder has a single
/// layer, so the field is accepted and ignored there.
pub const DEFAULT_TOKEN_LAYER: &str = "final-output-tokens";

/// How a configuration names an encoder: a registry name plus either a seed
/// (toy encoders) or a weights path (declared adapters).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub name: String,
    pub seed: Option<u64>,
    pub weights: Option<PathBuf>,
    /// Which token layer a structure adapter should export; `None` means
    /// [`DEFAULT_TOKEN_LAYER`].
    pub token_layer: Option<String>,
}

impl EncoderSpec {
    pub fn toy(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            seed: Some(seed),
            weights: None,
            token_layer: None,
        }
    }
}

pub const TOY_SEMANTIC: &str = "toy-semantic";
pub const TOY_PATCH: &str = "toy-patch";

/// Registry of every encoder this build knows about, including declared
/// weight-backed adapters that cannot be constructed without weight files.
pub fn declared_encoders() -> Vec<EncoderDescriptor> {
    vec![
        ToySemanticEncoder::seeded(0).descriptor().clone(),
        ToyPatchEncoder::seeded(0).descriptor().clone(),
        EncoderDescriptor {
            name: "clip-vit-b32".into(),
            semantic_dim: 512,
            token_dim: 512,
            input_resolution: (224, 224),
            value_range: (0.0, 1.0),
        },
        EncoderDescriptor {
            name: "dino-vit-s8".into(),
            semantic_dim: 384,
            token_dim: 384,
            input_resolution: (224, 224),
            value_range: (0.0, 1.0),
        },
    ]
}

fn require_seed(spec: &EncoderSpec) -> Result<u64> {
    spec.seed.ok_or_else(|| {
        Error::Config(format!("encoder '{}' is a toy encoder and needs a seed", spec.name))
    })
}

pub fn build_semantic_encoder(spec: &EncoderSpec) -> Result<Box<dyn SemanticEncoder>> {
    match spec.name.as_str() {
        TOY_SEMANTIC => Ok(Box::new(ToySemanticEncoder::seeded(require_seed(spec)?))),
        "clip-vit-b32" => Err(Error::EncoderWeightsRequired { name: spec.name.clone() }),
        other => Err(Error::UnknownEncoder(other.to_string())),
    }
}

pub fn build_structure_encoder(spec: &EncoderSpec) -> Result<Box<dyn StructureEncoder>> {
    match spec.name.as_str() {
        TOY_PATCH => Ok(Box::new(ToyPatchEncoder::seeded(require_seed(spec)?))),
        "dino-vit-s8" => Err(Error::EncoderWeightsRequired { name: spec.name.clone() }),
        other => Err(Error::UnknownEncoder(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_constructor_normalizes() {
        let e = EmbeddingVector::unit(vec![3.0, 4.0]).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-12);
        assert_eq!(e.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn unit_constructor_rejects_zero_vector() {
        assert!(matches!(
            EmbeddingVector::unit(vec![0.0, 0.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn grid_shape_must_be_consistent() {
        assert!(PatchTokenGrid::new(vec![0.0; 12], 3, 2, 2).is_ok());
        assert!(matches!(
            PatchTokenGrid::new(vec![0.0; 11], 3, 2, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn unknown_encoder_names_are_rejected() {
        let spec = EncoderSpec::toy("no-such-encoder", 1);
        assert!(matches!(
            build_semantic_encoder(&spec),
            Err(Error::UnknownEncoder(_))
        ));
    }

    #[test]
    fn declared_adapters_require_weights() {
        let spec = EncoderSpec::toy("clip-vit-b32", 1);
        assert!(matches!(
            build_semantic_encoder(&spec),
            Err(Error::EncoderWeightsRequired { .. })
        ));
        let spec = EncoderSpec::toy("dino-vit-s8", 1);
        assert!(matches!(
            build_structure_encoder(&spec),
            Err(Error::EncoderWeightsRequired { .. })
        ));
    }

    #[test]
    fn encoders_are_shareable_across_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<ToySemanticEncoder>();
        assert_send_sync::<ToyPatchEncoder>();
    }
}
