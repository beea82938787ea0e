//! Embedding-space direction algebra.
//!
//! A target domain is described by references (text prompts or single
//! images). Each reference yields a shift vector relative to the source
//! anchor: reference embedding minus the mean source-sample embedding for
//! images, or minus the source prompt embedding for text. Shifts compose
//! linearly with per-domain coefficients, and the alignment loss drives the
//! per-sample embedding shift of the adapted generator toward the composed
//! direction.
//!
//! Direction files (`.uhdv`) are flat little-endian float32 dumps:
//!   magic "UHDV" | version u32 | dim u32 | count u32 | count*dim f32

use std::fs;
use std::path::Path;

use crate::encoders::{EmbeddingVector, SemanticEncoder};
use crate::error::{Error, Result};
use crate::generators::{generate, GeneratorHandle, NoiseBatch};
use crate::rng::substream;
use crate::vecmath::{dot, norm};

/// Regularizer added to both norms in the alignment loss so the value and
/// gradient stay finite when the sample shift is still zero at the start of
/// training.
pub const LOSS_NORM_EPSILON: f64 = 1e-8;

/// A composed domain direction with norm at or below this cannot steer the
/// generator and is treated as a configuration error.
pub const DEGENERATE_DIRECTION_NORM: f64 = 1e-6;

/// Interpolation grid used by default when sweeping between two domains.
pub const DEFAULT_SWEEP_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

/// Default weight given to each domain reference when none is configured.
pub const DEFAULT_DOMAIN_COEFFICIENT: f64 = 0.5;

/// Default prompt describing the source domain.
pub const DEFAULT_SOURCE_PROMPT: &str = "photo";

pub const DIRECTION_FILE_MAGIC: &[u8; 4] = b"UHDV";
pub const DIRECTION_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

/// One reference describing part of the target domain: a prompt (text) or a
/// path to a reference image, plus its composition coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainReference {
    pub modality: Modality,
    pub payload: String,
    pub coefficient: f64,
}

impl DomainReference {
    pub fn text(payload: impl Into<String>, coefficient: f64) -> Self {
        Self { modality: Modality::Text, payload: payload.into(), coefficient }
    }

    pub fn image(path: impl Into<String>, coefficient: f64) -> Self {
        Self { modality: Modality::Image, payload: path.into(), coefficient }
    }

    pub fn validate(&self) -> Result<()> {
        if self.payload.is_empty() {
            return Err(Error::InvalidInput("domain reference payload must not be empty".into()));
        }
        if !self.coefficient.is_finite() {
            return Err(Error::InvalidInput(format!(
                "domain coefficient must be finite, got {}",
                self.coefficient
            )));
        }
        Ok(())
    }
}

/// A direction in the joint embedding space. Unlike [`EmbeddingVector`]
/// these are not unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionVector {
    values: Vec<f64>,
}

impl DirectionVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("direction must not be empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("direction contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

/// Frozen description of the source domain: the renormalized mean embedding
/// of `sample_count` source samples and the source prompt embedding, with
/// the seed that produced the sample noise.
#[derive(Debug, Clone)]
pub struct SourceAnchor {
    pub mean_image_embedding: EmbeddingVector,
    pub source_prompt_embedding: EmbeddingVector,
    pub sample_count: usize,
    pub seed: u64,
}

/// Mean of unit embeddings, renormalized back to the unit sphere.
pub fn mean_unit_embedding(embeddings: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot average zero embeddings".into()))?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::Shape(format!(
                "embedding dimensions disagree: {} vs {dim}",
                e.dim()
            )));
        }
        for (a, v) in acc.iter_mut().zip(e.as_slice()) {
            *a += v;
        }
    }
    let count = embeddings.len() as f64;
    for a in &mut acc {
        *a /= count;
    }
    EmbeddingVector::unit(acc)
}

/// Sample `sample_count` source images with noise from the anchor substream
/// of `seed`, embed them, and average. Also embeds the source prompt.
pub fn compute_source_anchor(
    generator: &GeneratorHandle,
    encoder: &dyn SemanticEncoder,
    source_prompt: &str,
    sample_count: usize,
    seed: u64,
) -> Result<SourceAnchor> {
    if sample_count == 0 {
        return Err(Error::InvalidInput("anchor sample count must be at least 1".into()));
    }
    let arch = generator.architecture()?;
    let mut rng = substream(seed, "anchor-noise");
    let noise = NoiseBatch::from_rng(&mut rng, sample_count, arch.noise_dim(), seed)?;
    let images = generate(generator, &noise)?;
    let embeddings = images
        .iter()
        .map(|img| encoder.embed_image(img))
        .collect::<Result<Vec<_>>>()?;
    Ok(SourceAnchor {
        mean_image_embedding: mean_unit_embedding(&embeddings)?,
        source_prompt_embedding: encoder.embed_text(source_prompt)?,
        sample_count,
        seed,
    })
}

/// Difference of two embeddings, `target - source`.
pub fn embedding_shift(target: &EmbeddingVector, source: &EmbeddingVector) -> Result<DirectionVector> {
    if target.dim() != source.dim() {
        return Err(Error::Shape(format!(
            "embedding dimensions disagree: {} vs {}",
            target.dim(),
            source.dim()
        )));
    }
    let values = target
        .as_slice()
        .iter()
        .zip(source.as_slice())
        .map(|(t, s)| t - s)
        .collect();
    DirectionVector::new(values)
}

/// Shift of an image reference relative to the mean source-sample embedding.
pub fn image_domain_shift(reference: &EmbeddingVector, anchor: &SourceAnchor) -> Result<DirectionVector> {
    embedding_shift(reference, &anchor.mean_image_embedding)
}

/// Shift of a text reference relative to the source prompt embedding.
pub fn text_domain_shift(target_prompt: &EmbeddingVector, anchor: &SourceAnchor) -> Result<DirectionVector> {
    embedding_shift(target_prompt, &anchor.source_prompt_embedding)
}

/// Coefficient-weighted sum of shifts. Purely linear: no normalization and
/// no constraint on the coefficient sum.
pub fn compose_directions(shifts: &[(DirectionVector, f64)]) -> Result<DirectionVector> {
    let (first, _) = shifts
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot compose zero directions".into()))?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for (shift, coefficient) in shifts {
        if shift.dim() != dim {
            return Err(Error::Shape(format!(
                "direction dimensions disagree: {} vs {dim}",
                shift.dim()
            )));
        }
        if !coefficient.is_finite() {
            return Err(Error::InvalidInput(format!(
                "composition coefficient must be finite, got {coefficient}"
            )));
        }
        for (a, v) in acc.iter_mut().zip(shift.as_slice()) {
            *a += coefficient * v;
        }
    }
    DirectionVector::new(acc)
}

/// Regularized cosine: `a.b / ((|a| + eps) (|b| + eps))`. Zero when either
/// argument is the zero vector.
pub fn regularized_cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / ((norm(a) + LOSS_NORM_EPSILON) * (norm(b) + LOSS_NORM_EPSILON))
}

fn check_loss_inputs(sample_shift: &DirectionVector, domain_shift: &DirectionVector) -> Result<()> {
    if sample_shift.dim() != domain_shift.dim() {
        return Err(Error::Shape(format!(
            "sample shift has dim {}, domain shift has dim {}",
            sample_shift.dim(),
            domain_shift.dim()
        )));
    }
    if domain_shift.norm() <= DEGENERATE_DIRECTION_NORM {
        return Err(Error::DegenerateDomain(format!(
            "domain shift norm {:.3e} is at or below {DEGENERATE_DIRECTION_NORM:.0e}",
            domain_shift.norm()
        )));
    }
    Ok(())
}

/// Alignment loss: one minus the regularized cosine between the sample
/// shift and the domain shift. Ranges over `[0, 2]` up to the regularizer
/// and equals exactly 1 at zero sample shift.
pub fn direction_loss(sample_shift: &DirectionVector, domain_shift: &DirectionVector) -> Result<f64> {
    check_loss_inputs(sample_shift, domain_shift)?;
    Ok(1.0 - regularized_cosine(sample_shift.as_slice(), domain_shift.as_slice()))
}

/// [`direction_loss`] plus its gradient with respect to the sample shift.
///
/// The gradient is the exact derivative of the regularized expression; at
/// zero sample shift the curvature term vanishes and the finite value
/// `-d / (eps * (|d| + eps))` remains, which is what lets training leave
/// the initial point.
pub fn direction_loss_with_grad(
    sample_shift: &DirectionVector,
    domain_shift: &DirectionVector,
) -> Result<(f64, Vec<f64>)> {
    check_loss_inputs(sample_shift, domain_shift)?;
    let s = sample_shift.as_slice();
    let d = domain_shift.as_slice();
    let ns = norm(s);
    let nd = norm(d);
    let denom = (ns + LOSS_NORM_EPSILON) * (nd + LOSS_NORM_EPSILON);
    let sd = dot(s, d);
    let loss = 1.0 - sd / denom;
    let radial = if ns > 0.0 {
        sd / (ns * (ns + LOSS_NORM_EPSILON) * (ns + LOSS_NORM_EPSILON) * (nd + LOSS_NORM_EPSILON))
    } else {
        0.0
    };
    let grad = (0..s.len()).map(|k| -d[k] / denom + radial * s[k]).collect();
    Ok((loss, grad))
}

/// Straight-line interpolation between two domain shifts over `grid`:
/// each entry `t` composes the pair with coefficients `(1 - t, t)`.
pub fn interpolation_sweep(
    shift_a: &DirectionVector,
    shift_b: &DirectionVector,
    grid: &[f64],
) -> Result<Vec<DirectionVector>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("interpolation grid must not be empty".into()));
    }
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("interpolation grid contains non-finite values".into()));
    }
    grid.iter()
        .map(|&t| {
            compose_directions(&[(shift_a.clone(), 1.0 - t), (shift_b.clone(), t)])
        })
        .collect()
}

/// Write directions as a `.uhdv` file. All vectors must share one dimension.
pub fn write_direction_file(path: &Path, directions: &[DirectionVector]) -> Result<()> {
    let first = directions
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot write an empty direction file".into()))?;
    let dim = first.dim();
    for d in directions {
        if d.dim() != dim {
            return Err(Error::Shape(format!(
                "direction dimensions disagree: {} vs {dim}",
                d.dim()
            )));
        }
    }
    let mut bytes = Vec::with_capacity(16 + directions.len() * dim * 4);
    bytes.extend_from_slice(DIRECTION_FILE_MAGIC);
    bytes.extend_from_slice(&DIRECTION_FILE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(directions.len() as u32).to_le_bytes());
    for d in directions {
        for &v in d.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::File { path: path.to_path_buf(), source: e })
}

/// Read a `.uhdv` file written by [`write_direction_file`].
pub fn read_direction_file(path: &Path) -> Result<Vec<DirectionVector>> {
    let bytes = fs::read(path).map_err(|e| Error::File { path: path.to_path_buf(), source: e })?;
    let format_err = |reason: &str| Error::Format { format: "UHDV", reason: reason.to_string() };
    if bytes.len() < 16 {
        return Err(format_err("file shorter than the fixed header"));
    }
    if &bytes[0..4] != DIRECTION_FILE_MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DIRECTION_FILE_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "UHDV",
            found: version,
            supported: DIRECTION_FILE_VERSION,
        });
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if dim == 0 || count == 0 {
        return Err(format_err("zero dimension or count"));
    }
    let expected = 16 + 4 * dim * count;
    if bytes.len() < expected {
        return Err(format_err("truncated payload"));
    }
    if bytes.len() > expected {
        return Err(format_err("trailing bytes after payload"));
    }
    let mut directions = Vec::with_capacity(count);
    let mut offset = 16;
    for _ in 0..count {
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(format_err("non-finite direction component"));
            }
            values.push(v as f64);
            offset += 4;
        }
        directions.push(DirectionVector::new(values)?);
    }
    Ok(directions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(values: &[f64]) -> DirectionVector {
        DirectionVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn mean_unit_embedding_renormalizes() {
        let a = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let b = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
        let mean = mean_unit_embedding(&[a, b]).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert!((mean.as_slice()[0] - r).abs() < 1e-15);
        assert!((mean.as_slice()[1] - r).abs() < 1e-15);
    }

    #[test]
    fn shifts_subtract_the_right_anchor_component() {
        let anchor = SourceAnchor {
            mean_image_embedding: EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
            source_prompt_embedding: EmbeddingVector::new(vec![0.0, 1.0]).unwrap(),
            sample_count: 1,
            seed: 0,
        };
        let reference = EmbeddingVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(image_domain_shift(&reference, &anchor).unwrap().as_slice(), &[-0.5, 0.5]);
        assert_eq!(text_domain_shift(&reference, &anchor).unwrap().as_slice(), &[0.5, -0.5]);
    }

    #[test]
    fn compose_matches_hand_computed_example() {
        let composed = compose_directions(&[(dv(&[2.0, 0.0]), 0.5), (dv(&[0.0, 4.0]), 0.25)]).unwrap();
        assert_eq!(composed.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn compose_rejects_empty_input() {
        assert!(matches!(compose_directions(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn compose_has_no_coefficient_sum_constraint() {
        let composed = compose_directions(&[(dv(&[1.0]), 10.0), (dv(&[1.0]), -3.0)]).unwrap();
        assert_eq!(composed.as_slice(), &[7.0]);
    }

    #[test]
    fn loss_hits_its_extremes() {
        let d = dv(&[0.0, 3.0]);
        // Aligned, orthogonal, and opposed sample shifts.
        assert!(direction_loss(&dv(&[0.0, 1.0]), &d).unwrap() < 1e-6);
        assert!((direction_loss(&dv(&[5.0, 0.0]), &d).unwrap() - 1.0).abs() < 1e-7);
        assert!((direction_loss(&dv(&[0.0, -2.0]), &d).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn loss_is_exactly_one_at_zero_shift() {
        let loss = direction_loss(&dv(&[0.0, 0.0]), &dv(&[1.0, 1.0])).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn zero_shift_gradient_is_finite_and_descends_toward_the_domain() {
        let d = dv(&[0.6, -0.8]);
        let (loss, grad) = direction_loss_with_grad(&dv(&[0.0, 0.0]), &d).unwrap();
        assert_eq!(loss, 1.0);
        assert!(grad.iter().all(|g| g.is_finite()));
        // Moving against the gradient must increase alignment with d.
        let descent: f64 = grad.iter().zip(d.as_slice()).map(|(g, d)| -g * d).sum();
        assert!(descent > 0.0);
    }

    #[test]
    fn degenerate_domain_is_rejected() {
        let tiny = dv(&[1e-7, 0.0]);
        assert!(matches!(
            direction_loss(&dv(&[1.0, 0.0]), &tiny),
            Err(Error::DegenerateDomain(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(matches!(
            direction_loss(&dv(&[1.0, 0.0, 0.0]), &dv(&[1.0, 0.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sweep_endpoints_equal_the_pure_shifts_bitwise() {
        let a = dv(&[0.3, -1.7, 2.9]);
        let b = dv(&[-0.4, 0.8, 1.1]);
        let sweep = interpolation_sweep(&a, &b, &DEFAULT_SWEEP_GRID).unwrap();
        assert_eq!(sweep.len(), 6);
        assert_eq!(sweep[0].as_slice(), a.as_slice());
        assert_eq!(sweep[5].as_slice(), b.as_slice());
    }

    #[test]
    fn sweep_midpoint_matches_compose() {
        let a = dv(&[2.0, 0.0]);
        let b = dv(&[0.0, 4.0]);
        let sweep = interpolation_sweep(&a, &b, &[0.5]).unwrap();
        let composed = compose_directions(&[(a, 0.5), (b, 0.5)]).unwrap();
        assert_eq!(sweep[0].as_slice(), composed.as_slice());
    }

    #[test]
    fn direction_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.uhdv");
        let directions = vec![dv(&[0.5, -1.25, 3.0]), dv(&[0.0625, 7.0, -0.5])];
        write_direction_file(&path, &directions).unwrap();
        let back = read_direction_file(&path).unwrap();
        assert_eq!(back, directions);
        // Write-read-write must be byte stable.
        let first = std::fs::read(&path).unwrap();
        write_direction_file(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn direction_file_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.uhdv");
        write_direction_file(&path, &[dv(&[1.0, 2.0])]).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = path.with_extension("magic");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        assert!(matches!(read_direction_file(&bad_magic), Err(Error::Format { .. })));

        let truncated = path.with_extension("trunc");
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_direction_file(&truncated), Err(Error::Format { .. })));

        let versioned = path.with_extension("ver");
        let mut b = bytes.clone();
        b[4] = 9;
        std::fs::write(&versioned, &b).unwrap();
        assert!(matches!(
            read_direction_file(&versioned),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }
}
