//! Adaptation loop: align generated-sample embedding shifts with a composed
//! domain direction while a structure loss pins patch layout to the frozen
//! source.
//!
//! Everything downstream of the config seed is deterministic: anchor noise,
//! training noise, and held-out noise come from named substreams, and the
//! persisted training log carries no timestamps, so rerunning a config
//! reproduces the log and checkpoint byte for byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::css::{css_batch_loss_with_grads, CssConfig};
use crate::directions::{
    compose_directions, compute_source_anchor, direction_loss_with_grad, image_domain_shift,
    regularized_cosine, text_domain_shift, DirectionVector, DomainReference, Modality,
    SourceAnchor, DEFAULT_SOURCE_PROMPT, DEGENERATE_DIRECTION_NORM,
};
use crate::encoders::{
    build_semantic_encoder, build_structure_encoder, EncoderSpec, SemanticEncoder,
    StructureEncoder, TOY_PATCH, TOY_SEMANTIC,
};
use crate::error::{Error, Result};
use crate::generators::{
    generate, load_checkpoint, save_checkpoint, GeneratorHandle, NoiseBatch,
};
use crate::image::load_image;
use crate::optim::Adam;
use crate::rng::substream;

pub const DEFAULT_LAMBDA_CSS: f64 = 5.0;
pub const DEFAULT_LEARNING_RATE: f64 = 0.002;
pub const DEFAULT_BATCH_SIZE: usize = 4;
pub const DEFAULT_ITERATIONS: usize = 300;
pub const DEFAULT_ANCHOR_SAMPLES: usize = 64;

/// A run aborts once the overall loss exceeds this multiple of its initial
/// value for [`DIVERGENCE_PATIENCE`] consecutive iterations.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 20;

/// Where the frozen source generator comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    Toy { seed: u64 },
    Checkpoint { path: PathBuf },
}

/// Everything a run needs. Field defaults match [`AdaptationConfig::new`];
/// encoder specs without a seed inherit the run seed.
#[derive(Debug, Clone)]
pub struct AdaptationConfig {
    pub source: SourceSpec,
    pub source_prompt: String,
    pub domains: Vec<DomainReference>,
    /// Weight of the structure loss in the overall objective.
    pub lambda_css: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Source samples averaged into the anchor embedding.
    pub anchor_sample_count: usize,
    pub semantic_encoder: EncoderSpec,
    pub structure_encoder: EncoderSpec,
    pub css: CssConfig,
    pub output_dir: PathBuf,
}

impl AdaptationConfig {
    pub fn new(source: SourceSpec, domains: Vec<DomainReference>, output_dir: PathBuf) -> Self {
        Self {
            source,
            source_prompt: DEFAULT_SOURCE_PROMPT.to_string(),
            domains,
            lambda_css: DEFAULT_LAMBDA_CSS,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
            anchor_sample_count: DEFAULT_ANCHOR_SAMPLES,
            semantic_encoder: EncoderSpec {
                name: TOY_SEMANTIC.to_string(),
                seed: None,
                weights: None,
                token_layer: None,
            },
            structure_encoder: EncoderSpec {
                name: TOY_PATCH.to_string(),
                seed: None,
                weights: None,
                token_layer: None,
            },
            css: CssConfig::default(),
            output_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_prompt.trim().is_empty() {
            return Err(Error::Config("source prompt must not be empty".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain reference is required".into()));
        }
        for domain in &self.domains {
            domain.validate()?;
        }
        if !self.lambda_css.is_finite() || self.lambda_css < 0.0 {
            return Err(Error::Config(format!(
                "lambda_css must be finite and non-negative, got {}",
                self.lambda_css
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.anchor_sample_count == 0 {
            return Err(Error::Config("anchor_sample_count must be at least 1".into()));
        }
        self.css.validate()?;
        Ok(())
    }

    fn effective_spec(&self, spec: &EncoderSpec) -> EncoderSpec {
        let mut spec = spec.clone();
        if spec.seed.is_none() {
            spec.seed = Some(self.seed);
        }
        spec
    }

    /// SHA-256 over a canonical rendering of every behavior-relevant field.
    /// The output directory is deliberately excluded so the same run in two
    /// places fingerprints identically.
    pub fn fingerprint(&self) -> String {
        let mut text = String::new();
        match &self.source {
            SourceSpec::Toy { seed } => text.push_str(&format!("source=toy seed={seed}\n")),
            SourceSpec::Checkpoint { path } => {
                text.push_str(&format!("source=checkpoint path={:?}\n", path))
            }
        }
        text.push_str(&format!("source_prompt={:?}\n", self.source_prompt));
        for d in &self.domains {
            text.push_str(&format!(
                "domain modality={} payload={:?} coefficient={}\n",
                d.modality.as_str(),
                d.payload,
                d.coefficient
            ));
        }
        text.push_str(&format!("lambda_css={}\n", self.lambda_css));
        text.push_str(&format!("learning_rate={}\n", self.learning_rate));
        text.push_str(&format!("batch_size={}\n", self.batch_size));
        text.push_str(&format!("iterations={}\n", self.iterations));
        text.push_str(&format!("seed={}\n", self.seed));
        text.push_str(&format!("anchor_sample_count={}\n", self.anchor_sample_count));
        for (role, spec) in [
            ("semantic", self.effective_spec(&self.semantic_encoder)),
            ("structure", self.effective_spec(&self.structure_encoder)),
        ] {
            text.push_str(&format!(
                "encoder role={role} name={} seed={:?} weights={:?} token_layer={:?}\n",
                spec.name, spec.seed, spec.weights, spec.token_layer
            ));
        }
        text.push_str(&format!(
            "css temperature={} reduction={}\n",
            self.css.temperature,
            self.css.reduction.as_str()
        ));
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Fixed artifact names inside a run's output directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
    pub config_path: PathBuf,
    pub manifest_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub metrics_path: PathBuf,
    pub samples_dir: PathBuf,
    pub lock_path: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            config_path: root.join("config.toml"),
            manifest_path: root.join("manifest.toml"),
            checkpoint_path: root.join("checkpoint.uhgc"),
            log_path: root.join("train.log"),
            metrics_path: root.join("metrics.report"),
            samples_dir: root.join("samples"),
            lock_path: root.join(".lock"),
        }
    }
}

/// Resolved, validated inputs of a run: the frozen source, both encoders,
/// the source anchor, and the composed domain direction.
pub struct AdaptationContext {
    pub config: AdaptationConfig,
    pub source: GeneratorHandle,
    pub semantic: Box<dyn SemanticEncoder>,
    pub structure: Box<dyn StructureEncoder>,
    pub anchor: SourceAnchor,
    pub domain_shifts: Vec<DirectionVector>,
    pub direction: DirectionVector,
}

impl AdaptationContext {
    pub fn resolve(config: &AdaptationConfig) -> Result<Self> {
        config.validate()?;
        let source = match &config.source {
            SourceSpec::Toy { seed } => GeneratorHandle::toy_source(*seed),
            SourceSpec::Checkpoint { path } => load_checkpoint(path)?,
        };
        let semantic = build_semantic_encoder(&config.effective_spec(&config.semantic_encoder))?;
        let structure = build_structure_encoder(&config.effective_spec(&config.structure_encoder))?;
        let anchor = compute_source_anchor(
            &source,
            semantic.as_ref(),
            &config.source_prompt,
            config.anchor_sample_count,
            config.seed,
        )?;
        let mut domain_shifts = Vec::with_capacity(config.domains.len());
        for domain in &config.domains {
            let shift = match domain.modality {
                Modality::Text => {
                    let embedding = semantic.embed_text(&domain.payload)?;
                    text_domain_shift(&embedding, &anchor)?
                }
                Modality::Image => {
                    let image = load_image(Path::new(&domain.payload))?;
                    let embedding = semantic.embed_image(&image)?;
                    image_domain_shift(&embedding, &anchor)?
                }
            };
            domain_shifts.push(shift);
        }
        let weighted: Vec<(DirectionVector, f64)> = domain_shifts
            .iter()
            .zip(&config.domains)
            .map(|(shift, domain)| (shift.clone(), domain.coefficient))
            .collect();
        let direction = compose_directions(&weighted)?;
        if direction.norm() <= DEGENERATE_DIRECTION_NORM {
            return Err(Error::DegenerateDomain(format!(
                "composed domain direction has norm {:.3e}; the references cancel \
                 or coincide with the source",
                direction.norm()
            )));
        }
        Ok(Self {
            config: config.clone(),
            source,
            semantic,
            structure,
            anchor,
            domain_shifts,
            direction,
        })
    }

    /// Alignment of the mean sample shift with the domain direction on
    /// fresh held-out noise: each shift pairs the target and source outputs
    /// of the same noise row. Training never sees the held-out substream.
    pub fn heldout_alignment(&self, target: &GeneratorHandle, sample_count: usize) -> Result<f64> {
        if sample_count == 0 {
            return Err(Error::InvalidInput("held-out sample count must be at least 1".into()));
        }
        let noise_dim = target.architecture()?.noise_dim();
        let noise = NoiseBatch::sample(self.config.seed, "heldout-noise", sample_count, noise_dim)?;
        let target_images = generate(target, &noise)?;
        let source_images = generate(&self.source, &noise)?;
        let mut mean_shift = vec![0.0; self.direction.dim()];
        for (target_image, source_image) in target_images.iter().zip(&source_images) {
            let target_embedding = self.semantic.embed_image(target_image)?;
            let source_embedding = self.semantic.embed_image(source_image)?;
            for ((m, t), s) in mean_shift
                .iter_mut()
                .zip(target_embedding.as_slice())
                .zip(source_embedding.as_slice())
            {
                *m += (t - s) / sample_count as f64;
            }
        }
        Ok(regularized_cosine(&mean_shift, self.direction.as_slice()))
    }
}

/// Losses and the parameter gradient for one batch, measured before any
/// update.
pub struct StepLosses {
    pub loss_direct: f64,
    pub loss_css: f64,
    pub loss_overall: f64,
    pub param_grad: Vec<f64>,
    /// Batch-mean sample shift (target embedding minus source embedding
    /// under the same noise).
    pub mean_shift: Vec<f64>,
}

/// Pure objective evaluation: generate from both generators with the same
/// noise, embed, score, and pull every gradient back onto the target
/// generator's parameters.
pub fn compute_step_loss(
    context: &AdaptationContext,
    target: &GeneratorHandle,
    noise: &NoiseBatch,
) -> Result<StepLosses> {
    let batch = noise.batch_size() as f64;
    let lambda = context.config.lambda_css;
    let target_images = generate(target, noise)?;
    let source_images = generate(&context.source, noise)?;

    let mut loss_direct = 0.0;
    let mut mean_shift = vec![0.0; context.direction.dim()];
    let mut image_cotangents = Vec::with_capacity(target_images.len());
    for (image, source_image) in target_images.iter().zip(&source_images) {
        let embedding = context.semantic.embed_image(image)?;
        let source_embedding = context.semantic.embed_image(source_image)?;
        let shift_values: Vec<f64> = embedding
            .as_slice()
            .iter()
            .zip(source_embedding.as_slice())
            .map(|(t, s)| t - s)
            .collect();
        for (m, s) in mean_shift.iter_mut().zip(&shift_values) {
            *m += s / batch;
        }
        let shift = DirectionVector::new(shift_values)?;
        let (loss, shift_grad) = direction_loss_with_grad(&shift, &context.direction)?;
        loss_direct += loss / batch;
        // The source side is frozen, so the shift gradient is the target
        // embedding cotangent once the batch mean is folded in.
        let cotangent: Vec<f64> = shift_grad.iter().map(|g| g / batch).collect();
        image_cotangents.push(context.semantic.embed_image_vjp(image, &cotangent)?);
    }

    let target_grids = target_images
        .iter()
        .map(|img| context.structure.encode_patches(img))
        .collect::<Result<Vec<_>>>()?;
    let source_grids = source_images
        .iter()
        .map(|img| context.structure.encode_patches(img))
        .collect::<Result<Vec<_>>>()?;
    let (loss_css, css_target_grads, _) =
        css_batch_loss_with_grads(&target_grids, &source_grids, &context.config.css)?;
    for (cotangent, (image, grid_grad)) in image_cotangents
        .iter_mut()
        .zip(target_images.iter().zip(&css_target_grads))
    {
        let scaled: Vec<f64> = grid_grad.iter().map(|g| lambda * g).collect();
        let structure_cotangent = context.structure.encode_patches_vjp(image, &scaled)?;
        for (c, s) in cotangent.iter_mut().zip(&structure_cotangent) {
            *c += s;
        }
    }

    let param_grad = target
        .architecture()?
        .generate_vjp(target.parameters(), noise, &image_cotangents)?;
    Ok(StepLosses {
        loss_direct,
        loss_css,
        loss_overall: loss_direct + lambda * loss_css,
        param_grad,
        mean_shift,
    })
}

/// One line of the training log. Wall time is kept for interactive display
/// but never persisted, so logs from identical runs are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLogRecord {
    pub iteration: usize,
    pub loss_direct: f64,
    pub loss_css: f64,
    pub loss_overall: f64,
    /// Regularized cosine between the batch-mean sample shift and the
    /// composed domain direction.
    pub sample_shift_cosine: f64,
    pub wall_time_ms: Option<u64>,
}

pub fn format_log_record(record: &TrainingLogRecord) -> String {
    format!(
        "iteration={} loss_direct={} loss_css={} loss_overall={} sample_shift_cosine={}",
        record.iteration,
        record.loss_direct,
        record.loss_css,
        record.loss_overall,
        record.sample_shift_cosine
    )
}

pub fn parse_log_record(line: &str) -> Result<TrainingLogRecord> {
    let mut record = TrainingLogRecord {
        iteration: 0,
        loss_direct: f64::NAN,
        loss_css: f64::NAN,
        loss_overall: f64::NAN,
        sample_shift_cosine: f64::NAN,
        wall_time_ms: None,
    };
    let mut seen_iteration = false;
    for token in line.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or_else(|| {
            Error::Format { format: "train.log", reason: format!("token '{token}' is not key=value") }
        })?;
        let bad = || Error::Format {
            format: "train.log",
            reason: format!("bad value for {key}: '{value}'"),
        };
        match key {
            "iteration" => {
                record.iteration = value.parse().map_err(|_| bad())?;
                seen_iteration = true;
            }
            "loss_direct" => record.loss_direct = value.parse().map_err(|_| bad())?,
            "loss_css" => record.loss_css = value.parse().map_err(|_| bad())?,
            "loss_overall" => record.loss_overall = value.parse().map_err(|_| bad())?,
            "sample_shift_cosine" => {
                record.sample_shift_cosine = value.parse().map_err(|_| bad())?
            }
            other => {
                return Err(Error::Format {
                    format: "train.log",
                    reason: format!("unknown key '{other}'"),
                })
            }
        }
    }
    if !seen_iteration || record.loss_direct.is_nan() || record.loss_overall.is_nan() {
        return Err(Error::Format {
            format: "train.log",
            reason: format!("incomplete record: '{line}'"),
        });
    }
    Ok(record)
}

/// A parsed training log: the per-iteration records and whether the run
/// reached its completion marker.
#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub records: Vec<TrainingLogRecord>,
    pub completed: bool,
}

pub fn read_training_log(path: &Path) -> Result<TrainingLog> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::File { path: path.to_path_buf(), source: e })?;
    let mut records = Vec::new();
    let mut completed = false;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        if line == "status=complete" {
            completed = true;
        } else if line.starts_with("status=") {
            completed = false;
        } else {
            records.push(parse_log_record(line)?);
        }
    }
    Ok(TrainingLog { records, completed })
}

/// Mutable training state between iterations.
pub struct AdaptationState {
    pub target: GeneratorHandle,
    optimizer: Adam,
    noise_rng: rand_chacha::ChaCha8Rng,
    iteration: usize,
    initial_loss: Option<f64>,
    high_loss_streak: usize,
}

pub fn prepare(context: &AdaptationContext) -> Result<AdaptationState> {
    let target = context.source.clone_as_target();
    let optimizer = Adam::new(context.config.learning_rate, target.parameters().len())?;
    Ok(AdaptationState {
        target,
        optimizer,
        noise_rng: substream(context.config.seed, "train-noise"),
        iteration: 0,
        initial_loss: None,
        high_loss_streak: 0,
    })
}

/// Draw a fresh batch, measure the losses, then update the target. The
/// returned record reports the pre-update objective.
pub fn train_step(context: &AdaptationContext, state: &mut AdaptationState) -> Result<TrainingLogRecord> {
    let started = Instant::now();
    let noise_dim = state.target.architecture()?.noise_dim();
    let noise = NoiseBatch::from_rng(
        &mut state.noise_rng,
        context.config.batch_size,
        noise_dim,
        context.config.seed,
    )?;
    state.iteration += 1;
    let losses = compute_step_loss(context, &state.target, &noise)?;
    if !losses.loss_overall.is_finite() {
        return Err(Error::TrainingDiverged {
            iteration: state.iteration,
            reason: format!("overall loss became {}", losses.loss_overall),
        });
    }
    let initial = *state.initial_loss.get_or_insert(losses.loss_overall.abs().max(1e-12));
    if losses.loss_overall > DIVERGENCE_FACTOR * initial {
        state.high_loss_streak += 1;
        if state.high_loss_streak >= DIVERGENCE_PATIENCE {
            return Err(Error::TrainingDiverged {
                iteration: state.iteration,
                reason: format!(
                    "loss {} stayed above {DIVERGENCE_FACTOR}x the initial loss {initial} \
                     for {DIVERGENCE_PATIENCE} iterations",
                    losses.loss_overall
                ),
            });
        }
    } else {
        state.high_loss_streak = 0;
    }
    let deltas = state.optimizer.deltas(&losses.param_grad)?;
    state.target.apply_update(&deltas)?;
    Ok(TrainingLogRecord {
        iteration: state.iteration,
        loss_direct: losses.loss_direct,
        loss_css: losses.loss_css,
        loss_overall: losses.loss_overall,
        sample_shift_cosine: regularized_cosine(&losses.mean_shift, context.direction.as_slice()),
        wall_time_ms: Some(started.elapsed().as_millis() as u64),
    })
}

pub struct RunOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<TrainingLogRecord>,
}

/// Full adaptation run: resolve, train for the configured iterations,
/// stream the log, and save the adapted checkpoint. On failure the log ends
/// with an abort marker instead of `status=complete`.
pub fn run(config: &AdaptationConfig) -> Result<RunOutcome> {
    let context = AdaptationContext::resolve(config)?;
    run_with_context(&context)
}

pub fn run_with_context(context: &AdaptationContext) -> Result<RunOutcome> {
    let config = &context.config;
    fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::File { path: config.output_dir.clone(), source: e })?;
    let layout = RunLayout::new(&config.output_dir);
    let file = File::create(&layout.log_path)
        .map_err(|e| Error::File { path: layout.log_path.clone(), source: e })?;
    let mut log = BufWriter::new(file);
    let mut state = prepare(context)?;
    let mut records = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        match train_step(context, &mut state) {
            Ok(record) => {
                writeln!(log, "{}", format_log_record(&record))?;
                records.push(record);
            }
            Err(err) => {
                writeln!(log, "status=aborted")?;
                log.flush()?;
                return Err(err);
            }
        }
    }
    writeln!(log, "status=complete")?;
    log.flush()?;
    save_checkpoint(&state.target, &layout.checkpoint_path)?;
    Ok(RunOutcome {
        checkpoint_path: layout.checkpoint_path,
        log_path: layout.log_path,
        records,
    })
}
