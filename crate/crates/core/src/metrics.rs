//! Evaluation metrics: text-side and image-side embedding similarity of
//! generated samples to the domain references, and a structural consistency
//! score between the source and adapted generators.
//!
//! The structural score compares token self-similarity patterns rather than
//! tokens directly, so it measures layout preservation independently of the
//! domain change; reports label it `scs (self-similarity variant)`.

use std::fs;
use std::path::Path;

use crate::directions::{regularized_cosine, Modality};
use crate::encoders::{PatchTokenGrid, SemanticEncoder, StructureEncoder};
use crate::error::{Error, Result};
use crate::generators::{generate, load_checkpoint, NoiseBatch};
use crate::image::{load_image, ImageTensor};
use crate::trainer::{AdaptationConfig, AdaptationContext};
use crate::vecmath::cosine;

pub const DEFAULT_EVAL_SAMPLES: usize = 64;

pub const SCS_VARIANT: &str = "self-similarity";

/// Mean cosine between one prompt's embedding and each generated image's
/// embedding.
pub fn cs_text(
    prompt: &str,
    generated: &[ImageTensor],
    encoder: &dyn SemanticEncoder,
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::InvalidInput("cs_text needs at least one generated image".into()));
    }
    let prompt_embedding = encoder.embed_text(prompt)?;
    let mut total = 0.0;
    for image in generated {
        total += prompt_embedding.cosine(&encoder.embed_image(image)?);
    }
    Ok(total / generated.len() as f64)
}

/// Mean embedding cosine over the full reference x generated cross product.
pub fn cs_image(
    references: &[ImageTensor],
    generated: &[ImageTensor],
    encoder: &dyn SemanticEncoder,
) -> Result<f64> {
    if references.is_empty() || generated.is_empty() {
        return Err(Error::InvalidInput("cs_image needs non-empty image sets on both sides".into()));
    }
    let reference_embeddings = references
        .iter()
        .map(|img| encoder.embed_image(img))
        .collect::<Result<Vec<_>>>()?;
    let generated_embeddings = generated
        .iter()
        .map(|img| encoder.embed_image(img))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for r in &reference_embeddings {
        for g in &generated_embeddings {
            total += r.cosine(g);
        }
    }
    Ok(total / (references.len() * generated.len()) as f64)
}

/// Row-major P x P matrix of token-row cosines within one grid.
fn self_similarity(grid: &PatchTokenGrid) -> Vec<f64> {
    let p = grid.position_count();
    let mut matrix = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            matrix[i * p + j] = regularized_cosine(grid.token(i), grid.token(j));
        }
    }
    matrix
}

/// Structural agreement of two token grids: mean cosine between
/// corresponding rows of their self-similarity matrices.
pub fn pair_structure_score(a: &PatchTokenGrid, b: &PatchTokenGrid) -> Result<f64> {
    if a.position_count() != b.position_count() || a.token_dim() != b.token_dim() {
        return Err(Error::Shape(format!(
            "grids disagree: {}x{} vs {}x{}",
            a.position_count(),
            a.token_dim(),
            b.position_count(),
            b.token_dim()
        )));
    }
    let p = a.position_count();
    let sim_a = self_similarity(a);
    let sim_b = self_similarity(b);
    let mut total = 0.0;
    for i in 0..p {
        total += regularized_cosine(&sim_a[i * p..(i + 1) * p], &sim_b[i * p..(i + 1) * p]);
    }
    Ok(total / p as f64)
}

/// Structural consistency over aligned image pairs (same noise index on
/// both sides); 1.0 when the lists are identical.
pub fn scs(
    source_images: &[ImageTensor],
    target_images: &[ImageTensor],
    encoder: &dyn StructureEncoder,
) -> Result<f64> {
    if source_images.len() != target_images.len() {
        return Err(Error::InvalidInput(format!(
            "scs needs aligned lists, got {} source vs {} target images",
            source_images.len(),
            target_images.len()
        )));
    }
    if source_images.is_empty() {
        return Err(Error::InvalidInput("scs needs at least one image pair".into()));
    }
    let mut total = 0.0;
    for (s, t) in source_images.iter().zip(target_images) {
        let grid_s = encoder.encode_patches(s)?;
        let grid_t = encoder.encode_patches(t)?;
        total += pair_structure_score(&grid_s, &grid_t)?;
    }
    Ok(total / source_images.len() as f64)
}

/// Mean cosine between same-position source and target tokens over aligned
/// pairs. More direct than [`scs`]; used to compare structure-loss on/off
/// runs.
pub fn mean_positional_cosine(
    source_images: &[ImageTensor],
    target_images: &[ImageTensor],
    encoder: &dyn StructureEncoder,
) -> Result<f64> {
    if source_images.len() != target_images.len() || source_images.is_empty() {
        return Err(Error::InvalidInput(format!(
            "aligned non-empty lists required, got {} vs {}",
            source_images.len(),
            target_images.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (s, t) in source_images.iter().zip(target_images) {
        let grid_s = encoder.encode_patches(s)?;
        let grid_t = encoder.encode_patches(t)?;
        if grid_s.position_count() != grid_t.position_count() {
            return Err(Error::Shape("token grids disagree in position count".into()));
        }
        for i in 0..grid_s.position_count() {
            total += cosine(grid_s.token(i), grid_t.token(i));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// How many inputs each metric saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleCounts {
    pub generated: usize,
    pub text_references: usize,
    pub image_references: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cs_t: Option<f64>,
    pub cs_i: Option<f64>,
    pub cs: Option<f64>,
    pub scs: Option<f64>,
    pub counts: SampleCounts,
    pub config_fingerprint: String,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("cs_t", self.cs_t),
            ("cs_i", self.cs_i),
            ("cs", self.cs),
            ("scs", self.scs),
        ] {
            if let Some(v) = value {
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "metric {name} out of range: {v}"
                    )));
                }
            }
        }
        match (self.cs_t, self.cs_i, self.cs) {
            (Some(t), Some(i), Some(c)) => {
                if (c - (t + i) / 2.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "cs = {c} is not the mean of cs_t = {t} and cs_i = {i}"
                    )));
                }
            }
            (_, _, None) => {}
            _ => {
                return Err(Error::InvalidInput(
                    "cs requires both cs_t and cs_i to be present".into(),
                ))
            }
        }
        Ok(())
    }
}

/// Evaluate an adapted checkpoint against the config's references: sample a
/// dedicated evaluation noise set, generate from both generators, and fill
/// in every metric the domain modalities support.
pub fn evaluate(
    config: &AdaptationConfig,
    checkpoint_path: &Path,
    sample_count: usize,
) -> Result<MetricsReport> {
    if sample_count == 0 {
        return Err(Error::InvalidInput("evaluation sample count must be at least 1".into()));
    }
    let context = AdaptationContext::resolve(config)?;
    let target = load_checkpoint(checkpoint_path)?;
    let noise_dim = target.architecture()?.noise_dim();
    let noise = NoiseBatch::sample(config.seed, "eval-noise", sample_count, noise_dim)?;
    let target_images = generate(&target, &noise)?;
    let source_images = generate(&context.source, &noise)?;

    let mut text_prompts = Vec::new();
    let mut reference_images = Vec::new();
    for domain in &config.domains {
        match domain.modality {
            Modality::Text => text_prompts.push(domain.payload.clone()),
            Modality::Image => reference_images.push(load_image(Path::new(&domain.payload))?),
        }
    }

    let cs_t = if text_prompts.is_empty() {
        None
    } else {
        let mut total = 0.0;
        for prompt in &text_prompts {
            total += cs_text(prompt, &target_images, context.semantic.as_ref())?;
        }
        Some(total / text_prompts.len() as f64)
    };
    let cs_i = if reference_images.is_empty() {
        None
    } else {
        Some(cs_image(&reference_images, &target_images, context.semantic.as_ref())?)
    };
    let cs = match (cs_t, cs_i) {
        (Some(t), Some(i)) => Some((t + i) / 2.0),
        _ => None,
    };
    let report = MetricsReport {
        cs_t,
        cs_i,
        cs,
        scs: Some(scs(&source_images, &target_images, context.structure.as_ref())?),
        counts: SampleCounts {
            generated: sample_count,
            text_references: text_prompts.len(),
            image_references: reference_images.len(),
        },
        config_fingerprint: config.fingerprint(),
    };
    report.validate()?;
    Ok(report)
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    report.validate()?;
    let mut text = String::new();
    text.push_str(&format!("fingerprint={}\n", report.config_fingerprint));
    text.push_str(&format!("generated_samples={}\n", report.counts.generated));
    text.push_str(&format!("text_references={}\n", report.counts.text_references));
    text.push_str(&format!("image_references={}\n", report.counts.image_references));
    text.push_str(&format!("scs_variant={SCS_VARIANT}\n"));
    for (key, value) in [
        ("cs_t", report.cs_t),
        ("cs_i", report.cs_i),
        ("cs", report.cs),
        ("scs", report.scs),
    ] {
        if let Some(v) = value {
            text.push_str(&format!("{key}={v}\n"));
        }
    }
    fs::write(path, text).map_err(|e| Error::File { path: path.to_path_buf(), source: e })
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::File { path: path.to_path_buf(), source: e })?;
    let mut report = MetricsReport {
        cs_t: None,
        cs_i: None,
        cs: None,
        scs: None,
        counts: SampleCounts::default(),
        config_fingerprint: String::new(),
    };
    let bad = |key: &str, value: &str| Error::Format {
        format: "metrics.report",
        reason: format!("bad value for {key}: '{value}'"),
    };
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
            format: "metrics.report",
            reason: format!("line '{line}' is not key=value"),
        })?;
        match key {
            "fingerprint" => report.config_fingerprint = value.to_string(),
            "generated_samples" => {
                report.counts.generated = value.parse().map_err(|_| bad(key, value))?
            }
            "text_references" => {
                report.counts.text_references = value.parse().map_err(|_| bad(key, value))?
            }
            "image_references" => {
                report.counts.image_references = value.parse().map_err(|_| bad(key, value))?
            }
            "scs_variant" => {
                if value != SCS_VARIANT {
                    return Err(Error::Format {
                        format: "metrics.report",
                        reason: format!("unknown scs variant '{value}'"),
                    });
                }
            }
            "cs_t" => report.cs_t = Some(value.parse().map_err(|_| bad(key, value))?),
            "cs_i" => report.cs_i = Some(value.parse().map_err(|_| bad(key, value))?),
            "cs" => report.cs = Some(value.parse().map_err(|_| bad(key, value))?),
            "scs" => report.scs = Some(value.parse().map_err(|_| bad(key, value))?),
            other => {
                return Err(Error::Format {
                    format: "metrics.report",
                    reason: format!("unknown key '{other}'"),
                })
            }
        }
    }
    report.validate()?;
    Ok(report)
}

/// Fixed-width one-row table of the four metric columns; absent metrics
/// print as n/a.
pub fn format_table(report: &MetricsReport) -> String {
    fn cell(value: Option<f64>) -> String {
        match value {
            Some(v) => format!("{v:>8.4}"),
            None => format!("{:>8}", "n/a"),
        }
    }
    let mut out = String::new();
    out.push_str(&format!("{:>8}{:>8}{:>8}{:>8}\n", "CS-T", "CS-I", "CS", "SCS"));
    out.push_str(&format!(
        "{}{}{}{}\n",
        cell(report.cs_t),
        cell(report.cs_i),
        cell(report.cs),
        cell(report.scs)
    ));
    out.push_str(&format!("scs: {SCS_VARIANT} variant\n"));
    out
}
