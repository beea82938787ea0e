use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use genshift::directions::{interpolation_sweep, write_direction_file, DEFAULT_SWEEP_GRID};
use genshift::generators::{generate, load_checkpoint, GeneratorHandle, NoiseBatch};
use genshift::image::{save_image, ImageTensor};
use genshift::metrics::{evaluate, format_table, write_report, DEFAULT_EVAL_SAMPLES};
use genshift::trainer::{run, AdaptationContext, RunLayout, SourceSpec};

use crate::config::load_config;
use crate::manifest::{inventory, record_artifacts, utc_timestamp, write_manifest, RunManifest};

/// Exclusive advisory lock on a run directory, released on drop. Only one
/// process may write into a run directory at a time.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(layout: &RunLayout) -> Result<Self> {
        fs::create_dir_all(&layout.root).with_context(|| {
            format!("cannot create output directory '{}'", layout.root.display())
        })?;
        match OpenOptions::new().write(true).create_new(true).open(&layout.lock_path) {
            Ok(_) => Ok(Self { path: layout.lock_path.clone() }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => bail!(
                "run directory '{}' is locked by another process (remove '{}' if that process is gone)",
                layout.root.display(),
                layout.lock_path.display()
            ),
            Err(e) => Err(e).with_context(|| {
                format!("cannot create lock file '{}'", layout.lock_path.display())
            }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn refuse_existing(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for path in paths {
        if path.exists() {
            bail!("'{}' already exists; pass --force to overwrite", path.display());
        }
    }
    Ok(())
}

pub fn adapt(config_path: &Path, force: bool) -> Result<()> {
    let config = load_config(config_path)?;
    let layout = RunLayout::new(&config.output_dir);
    let _lock = DirLock::acquire(&layout)?;
    refuse_existing(&[&layout.checkpoint_path, &layout.log_path, &layout.manifest_path], force)?;
    let started = utc_timestamp();
    fs::copy(config_path, &layout.config_path)
        .with_context(|| format!("cannot copy the config into '{}'", layout.root.display()))?;
    let outcome = run(&config)?;
    let manifest = RunManifest {
        fingerprint: config.fingerprint(),
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        started,
        finished: utc_timestamp(),
        artifacts: inventory(
            &layout.root,
            &[&layout.config_path, &outcome.checkpoint_path, &outcome.log_path],
        )?,
    };
    write_manifest(&manifest, &layout.manifest_path)?;
    let last = outcome.records.last().expect("a completed run has at least one record");
    println!(
        "adapted over {} iterations (final loss {:.6}, shift alignment {:.4})",
        outcome.records.len(),
        last.loss_overall,
        last.sample_shift_cosine
    );
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("manifest:   {}", layout.manifest_path.display());
    Ok(())
}

pub fn compose(
    config_path: &Path,
    sweep: bool,
    grid: Option<Vec<f64>>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let config = load_config(config_path)?;
    let layout = RunLayout::new(&config.output_dir);
    let out_path = out.unwrap_or_else(|| layout.root.join("directions.uhdv"));
    let _lock = DirLock::acquire(&layout)?;
    refuse_existing(&[&out_path], force)?;
    let context = AdaptationContext::resolve(&config)?;
    let directions = if sweep {
        let [shift_a, shift_b] = &context.domain_shifts[..] else {
            bail!(
                "--sweep interpolates between exactly two domains, the config has {}",
                context.domain_shifts.len()
            );
        };
        let grid = grid.unwrap_or_else(|| DEFAULT_SWEEP_GRID.to_vec());
        interpolation_sweep(shift_a, shift_b, &grid)?
    } else {
        vec![context.direction.clone()]
    };
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create '{}'", parent.display()))?;
    }
    write_direction_file(&out_path, &directions)?;
    if layout.manifest_path.exists() && out_path.starts_with(&layout.root) {
        record_artifacts(&layout.manifest_path, &layout.root, &[&out_path])?;
    }
    println!(
        "wrote {} direction(s) of dim {} to {}",
        directions.len(),
        directions[0].dim(),
        out_path.display()
    );
    Ok(())
}

pub fn eval(config_path: &Path, checkpoint: Option<PathBuf>, force: bool) -> Result<()> {
    let config = load_config(config_path)?;
    let layout = RunLayout::new(&config.output_dir);
    let checkpoint_path = checkpoint.unwrap_or_else(|| layout.checkpoint_path.clone());
    if !checkpoint_path.exists() {
        bail!(
            "checkpoint '{}' does not exist; run adapt first or pass --checkpoint",
            checkpoint_path.display()
        );
    }
    let _lock = DirLock::acquire(&layout)?;
    refuse_existing(&[&layout.metrics_path], force)?;
    let report = evaluate(&config, &checkpoint_path, DEFAULT_EVAL_SAMPLES)?;
    write_report(&report, &layout.metrics_path)?;
    if layout.manifest_path.exists() {
        record_artifacts(&layout.manifest_path, &layout.root, &[&layout.metrics_path])?;
    }
    print!("{}", format_table(&report));
    println!("report: {}", layout.metrics_path.display());
    Ok(())
}

pub fn sample(
    config_path: &Path,
    checkpoint: Option<PathBuf>,
    count: usize,
    seed: Option<u64>,
    force: bool,
) -> Result<()> {
    if count == 0 {
        bail!("--count must be at least 1");
    }
    let config = load_config(config_path)?;
    let layout = RunLayout::new(&config.output_dir);
    let checkpoint_path = checkpoint.unwrap_or_else(|| layout.checkpoint_path.clone());
    if !checkpoint_path.exists() {
        bail!(
            "checkpoint '{}' does not exist; run adapt first or pass --checkpoint",
            checkpoint_path.display()
        );
    }
    let _lock = DirLock::acquire(&layout)?;
    let source = load_source(&config.source)?;
    let target = load_checkpoint(&checkpoint_path)?;
    let noise_dim = target.architecture()?.noise_dim();
    let seed = seed.unwrap_or(config.seed);
    let noise = NoiseBatch::sample(seed, "sample-noise", count, noise_dim)?;
    let source_images = generate(&source, &noise)?;
    let target_images = generate(&target, &noise)?;
    fs::create_dir_all(&layout.samples_dir)
        .with_context(|| format!("cannot create '{}'", layout.samples_dir.display()))?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let path = layout.samples_dir.join(format!("pair-{i:03}.png"));
        refuse_existing(&[&path], force)?;
        let pair = side_by_side(&source_images[i], &target_images[i]);
        save_image(&pair, &path)?;
        written.push(path);
    }
    if layout.manifest_path.exists() {
        let paths: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
        record_artifacts(&layout.manifest_path, &layout.root, &paths)?;
    }
    println!("wrote {} source/target pair(s) to {}", count, layout.samples_dir.display());
    Ok(())
}

fn load_source(spec: &SourceSpec) -> Result<GeneratorHandle> {
    match spec {
        SourceSpec::Toy { seed } => Ok(GeneratorHandle::toy_source(*seed)),
        SourceSpec::Checkpoint { path } => Ok(load_checkpoint(path)?),
    }
}

/// Source on the left, target on the right, from the same noise row.
fn side_by_side(left: &ImageTensor, right: &ImageTensor) -> ImageTensor {
    let (h, w, c) = (left.height(), left.width(), left.channels());
    ImageTensor::from_fn(h, w * 2, c, |y, x, ch| {
        if x < w {
            left.get(y, x, ch)
        } else {
            right.get(y, x - w, ch)
        }
    })
}
