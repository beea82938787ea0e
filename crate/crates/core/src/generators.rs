//! Generator handles and the differentiable toy architecture.
//!
//! A [`GeneratorHandle`] is an architecture id plus a flat little-endian
//! float32 parameter vector and a trainable flag; frozen handles reject
//! updates. The toy architecture is a two-layer MLP from 32 noise
//! coordinates to a 32x32 RGB image squashed into `[0, 1]`, small enough to
//! train on a CPU core in seconds yet expressive enough to move embeddings.
//!
//! Checkpoints (`.uhgc`) are a fixed binary layout:
//!   magic "UHGC" | version u32 | id length u32 | architecture id utf-8 |
//!   parameter count u64 | parameters f32 little-endian | crc32 u32
//! The trailing CRC-32 (IEEE) covers every preceding byte.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::substream;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UHGC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A batch of standard-normal noise rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    values: Vec<f64>,
    batch_size: usize,
    noise_dim: usize,
    /// Root seed whose substream produced these rows (bookkeeping only).
    seed: u64,
}

impl NoiseBatch {
    /// Draw `batch_size` rows from an already-positioned stream.
    pub fn from_rng(
        rng: &mut ChaCha8Rng,
        batch_size: usize,
        noise_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 || noise_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "noise batch needs positive shape, got {batch_size}x{noise_dim}"
            )));
        }
        let values = (0..batch_size * noise_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self { values, batch_size, noise_dim, seed })
    }

    /// Draw a batch from the named substream of `seed`.
    pub fn sample(seed: u64, label: &str, batch_size: usize, noise_dim: usize) -> Result<Self> {
        let mut rng = substream(seed, label);
        Self::from_rng(&mut rng, batch_size, noise_dim, seed)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.noise_dim..(i + 1) * self.noise_dim]
    }
}

/// A fixed generator architecture: pure functions from parameters and noise
/// to images, plus the exact parameter pullback used for training.
pub trait GeneratorArchitecture: Send + Sync {
    fn id(&self) -> &'static str;
    fn noise_dim(&self) -> usize;
    /// (height, width, channels) of generated images.
    fn output_shape(&self) -> (usize, usize, usize);
    fn parameter_count(&self) -> usize;
    fn init_params(&self, seed: u64) -> Vec<f32>;
    fn generate(&self, params: &[f32], noise: &NoiseBatch) -> Result<Vec<ImageTensor>>;
    /// Pullback: cotangents on the generated images (one flat H*W*C buffer
    /// per batch row) to a gradient on the parameters.
    fn generate_vjp(
        &self,
        params: &[f32],
        noise: &NoiseBatch,
        image_cotangents: &[Vec<f64>],
    ) -> Result<Vec<f64>>;
}

pub const TOY_MLP_V1: &str = "toy-mlp-v1";

static TOY_MLP: ToyMlp = ToyMlp;

pub fn resolve_architecture(id: &str) -> Result<&'static dyn GeneratorArchitecture> {
    match id {
        TOY_MLP_V1 => Ok(&TOY_MLP),
        other => Err(Error::UnknownArchitecture(other.to_string())),
    }
}

pub fn architecture_ids() -> &'static [&'static str] {
    &[TOY_MLP_V1]
}

/// noise(32) -> tanh(64) -> sigmoid(32*32*3). Parameter layout, in order:
/// W1 row-major (64x32), b1 (64), W2 row-major (3072x64), b2 (3072).
/// The output biases start deep in the sigmoid tails (|b2| around 30), so
/// the canvas is effectively frozen at initialization: pixels sit at hard
/// black or white and the output Jacobian is exponentially small. Training
/// has to march the pre-activations back toward the live range before the
/// images can move at all, which keeps early sample shifts vanishingly
/// small and spreads the visible adaptation over many iterations. The
/// black/white mix is drawn from a per-cell color palette so different
/// regions of the canvas start with distinct mean colors.
struct ToyMlp;

const TOY_NOISE_DIM: usize = 32;
const TOY_HIDDEN: usize = 64;
const TOY_HEIGHT: usize = 32;
const TOY_WIDTH: usize = 32;
const TOY_CHANNELS: usize = 3;
const TOY_OUT: usize = TOY_HEIGHT * TOY_WIDTH * TOY_CHANNELS;
/// Side length of the init palette cells (see `init_params`).
const PALETTE_CELL: usize = 8;

const W1_LEN: usize = TOY_HIDDEN * TOY_NOISE_DIM;
const B1_OFF: usize = W1_LEN;
const W2_OFF: usize = B1_OFF + TOY_HIDDEN;
const B2_OFF: usize = W2_OFF + TOY_OUT * TOY_HIDDEN;
const TOY_PARAMS: usize = B2_OFF + TOY_OUT;

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl ToyMlp {
    fn check(&self, params: &[f32], noise: &NoiseBatch) -> Result<()> {
        if params.len() != TOY_PARAMS {
            return Err(Error::Shape(format!(
                "{TOY_MLP_V1} has {TOY_PARAMS} parameters, got {}",
                params.len()
            )));
        }
        if noise.noise_dim() != TOY_NOISE_DIM {
            return Err(Error::Shape(format!(
                "{TOY_MLP_V1} expects {TOY_NOISE_DIM}-dimensional noise, got {}",
                noise.noise_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass for one noise row; returns (hidden activations, outputs).
    fn forward(&self, params: &[f32], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut hidden = vec![0.0; TOY_HIDDEN];
        for h in 0..TOY_HIDDEN {
            let mut acc = params[B1_OFF + h] as f64;
            let row = &params[h * TOY_NOISE_DIM..(h + 1) * TOY_NOISE_DIM];
            for (w, zv) in row.iter().zip(z) {
                acc += *w as f64 * zv;
            }
            hidden[h] = acc.tanh();
        }
        let mut out = vec![0.0; TOY_OUT];
        for k in 0..TOY_OUT {
            let mut acc = params[B2_OFF + k] as f64;
            let row = &params[W2_OFF + k * TOY_HIDDEN..W2_OFF + (k + 1) * TOY_HIDDEN];
            for (w, hv) in row.iter().zip(&hidden) {
                acc += *w as f64 * hv;
            }
            out[k] = sigmoid(acc);
        }
        (hidden, out)
    }
}

impl GeneratorArchitecture for ToyMlp {
    fn id(&self) -> &'static str {
        TOY_MLP_V1
    }

    fn noise_dim(&self) -> usize {
        TOY_NOISE_DIM
    }

    fn output_shape(&self) -> (usize, usize, usize) {
        (TOY_HEIGHT, TOY_WIDTH, TOY_CHANNELS)
    }

    fn parameter_count(&self) -> usize {
        TOY_PARAMS
    }

    fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = substream(seed, "toy-mlp-init");
        let mut params = Vec::with_capacity(TOY_PARAMS);
        let w1_scale = 1.0 / (TOY_NOISE_DIM as f64).sqrt();
        for _ in 0..W1_LEN {
            let g: f64 = rng.sample(StandardNormal);
            params.push((g * w1_scale) as f32);
        }
        // Spread hidden biases widely so units sit at varied tanh levels;
        // their nonzero mean activations give every pixel a shared slow
        // channel for climbing out of the saturated output regime.
        for _ in 0..TOY_HIDDEN {
            let g: f64 = rng.sample(StandardNormal);
            params.push((g * 1.5) as f32);
        }
        for _ in 0..TOY_OUT * TOY_HIDDEN {
            let g: f64 = rng.sample(StandardNormal);
            params.push((g * 0.15) as f32);
        }
        // Each pixel starts pinned at black or white, with the white
        // probability drawn per 8x8 cell and channel. The cell palette gives
        // neighboring regions distinct mean colors instead of collapsing the
        // whole canvas onto the gray axis. The bias magnitude is far outside
        // the sigmoid's live range, with a small jitter so pixels thaw at
        // staggered times instead of all at once.
        let cells_x = TOY_WIDTH / PALETTE_CELL;
        let cell_count = (TOY_HEIGHT / PALETTE_CELL) * cells_x;
        let mut palette = Vec::with_capacity(cell_count * TOY_CHANNELS);
        for _ in 0..cell_count * TOY_CHANNELS {
            palette.push(rng.gen::<f64>());
        }
        for k in 0..TOY_OUT {
            let pixel = k / TOY_CHANNELS;
            let channel = k % TOY_CHANNELS;
            let y = pixel / TOY_WIDTH;
            let x = pixel % TOY_WIDTH;
            let cell = (y / PALETTE_CELL) * cells_x + x / PALETTE_CELL;
            let white: f64 = rng.gen();
            let j: f64 = rng.sample(StandardNormal);
            let depth = 30.0 + j;
            let lit = white < palette[cell * TOY_CHANNELS + channel];
            params.push(if lit { depth as f32 } else { -depth as f32 });
        }
        params
    }

    fn generate(&self, params: &[f32], noise: &NoiseBatch) -> Result<Vec<ImageTensor>> {
        self.check(params, noise)?;
        let mut images = Vec::with_capacity(noise.batch_size());
        for i in 0..noise.batch_size() {
            let (_, out) = self.forward(params, noise.row(i));
            images.push(ImageTensor::new(TOY_HEIGHT, TOY_WIDTH, TOY_CHANNELS, out)?);
        }
        Ok(images)
    }

    fn generate_vjp(
        &self,
        params: &[f32],
        noise: &NoiseBatch,
        image_cotangents: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        self.check(params, noise)?;
        if image_cotangents.len() != noise.batch_size() {
            return Err(Error::Shape(format!(
                "{} cotangents for a batch of {}",
                image_cotangents.len(),
                noise.batch_size()
            )));
        }
        let mut grad = vec![0.0; TOY_PARAMS];
        for i in 0..noise.batch_size() {
            let cot = &image_cotangents[i];
            if cot.len() != TOY_OUT {
                return Err(Error::Shape(format!(
                    "image cotangent has {} entries, expected {TOY_OUT}",
                    cot.len()
                )));
            }
            let z = noise.row(i);
            let (hidden, out) = self.forward(params, z);
            let mut d_hidden = vec![0.0; TOY_HIDDEN];
            for k in 0..TOY_OUT {
                // d sigmoid(u) / du = y (1 - y)
                let du = cot[k] * out[k] * (1.0 - out[k]);
                grad[B2_OFF + k] += du;
                let w_row = &params[W2_OFF + k * TOY_HIDDEN..W2_OFF + (k + 1) * TOY_HIDDEN];
                let g_row = &mut grad[W2_OFF + k * TOY_HIDDEN..W2_OFF + (k + 1) * TOY_HIDDEN];
                for h in 0..TOY_HIDDEN {
                    g_row[h] += du * hidden[h];
                    d_hidden[h] += du * w_row[h] as f64;
                }
            }
            for h in 0..TOY_HIDDEN {
                // d tanh(a) / da = 1 - h^2
                let da = d_hidden[h] * (1.0 - hidden[h] * hidden[h]);
                grad[B1_OFF + h] += da;
                let g_row = &mut grad[h * TOY_NOISE_DIM..(h + 1) * TOY_NOISE_DIM];
                for (g, zv) in g_row.iter_mut().zip(z) {
                    *g += da * zv;
                }
            }
        }
        Ok(grad)
    }
}

/// A generator bound to a registered architecture. The source side stays
/// frozen; training clones it into a trainable target.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorHandle {
    architecture_id: String,
    parameters: Vec<f32>,
    trainable: bool,
}

impl GeneratorHandle {
    /// Seeded frozen toy source generator.
    pub fn toy_source(seed: u64) -> Self {
        let params = TOY_MLP.init_params(seed);
        Self {
            architecture_id: TOY_MLP_V1.to_string(),
            parameters: params,
            trainable: false,
        }
    }

    pub fn from_parameters(architecture_id: &str, parameters: Vec<f32>, trainable: bool) -> Result<Self> {
        let arch = resolve_architecture(architecture_id)?;
        if parameters.len() != arch.parameter_count() {
            return Err(Error::Shape(format!(
                "architecture '{architecture_id}' has {} parameters, got {}",
                arch.parameter_count(),
                parameters.len()
            )));
        }
        if parameters.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("parameters contain non-finite values".into()));
        }
        Ok(Self { architecture_id: architecture_id.to_string(), parameters, trainable })
    }

    pub fn architecture_id(&self) -> &str {
        &self.architecture_id
    }

    pub fn architecture(&self) -> Result<&'static dyn GeneratorArchitecture> {
        resolve_architecture(&self.architecture_id)
    }

    pub fn parameters(&self) -> &[f32] {
        &self.parameters
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Deep copy with training enabled; the clone shares nothing with the
    /// source, so updating it cannot touch the frozen parameters.
    pub fn clone_as_target(&self) -> Self {
        Self {
            architecture_id: self.architecture_id.clone(),
            parameters: self.parameters.clone(),
            trainable: true,
        }
    }

    /// Add `deltas` to the parameters. Frozen handles refuse.
    pub fn apply_update(&mut self, deltas: &[f64]) -> Result<()> {
        if !self.trainable {
            return Err(Error::FrozenHandle);
        }
        if deltas.len() != self.parameters.len() {
            return Err(Error::Shape(format!(
                "update has {} entries for {} parameters",
                deltas.len(),
                self.parameters.len()
            )));
        }
        for (p, d) in self.parameters.iter_mut().zip(deltas) {
            let next = (*p as f64 + d) as f32;
            if !next.is_finite() {
                return Err(Error::InvalidInput("parameter update produced a non-finite value".into()));
            }
            *p = next;
        }
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes; used to assert the
    /// source stays untouched during training.
    pub fn parameter_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.parameters {
            hasher.update(p.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Run the handle's architecture on a noise batch.
pub fn generate(handle: &GeneratorHandle, noise: &NoiseBatch) -> Result<Vec<ImageTensor>> {
    handle.architecture()?.generate(handle.parameters(), noise)
}

/// Serialize a handle to the checkpoint byte layout (see module docs).
fn checkpoint_bytes(handle: &GeneratorHandle) -> Vec<u8> {
    let id = handle.architecture_id.as_bytes();
    let mut bytes = Vec::with_capacity(24 + id.len() + handle.parameters.len() * 4);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(id.len() as u32).to_le_bytes());
    bytes.extend_from_slice(id);
    bytes.extend_from_slice(&(handle.parameters.len() as u64).to_le_bytes());
    for p in &handle.parameters {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let mut crc = crc32fast::Hasher::new();
    crc.update(&bytes);
    bytes.extend_from_slice(&crc.finalize().to_le_bytes());
    bytes
}

pub fn save_checkpoint(handle: &GeneratorHandle, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(handle))
        .map_err(|e| Error::File { path: path.to_path_buf(), source: e })
}

/// Load a checkpoint. The returned handle is frozen; clone it as a target to
/// train. Checks magic, version, length, and the trailing CRC.
pub fn load_checkpoint(path: &Path) -> Result<GeneratorHandle> {
    let bytes = fs::read(path).map_err(|e| Error::File { path: path.to_path_buf(), source: e })?;
    let format_err = |reason: &str| Error::Format { format: "UHGC", reason: reason.to_string() };
    if bytes.len() < 12 {
        return Err(format_err("file shorter than the fixed header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "UHGC",
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let id_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + id_len + 8;
    if bytes.len() < header_end + 4 {
        return Err(format_err("truncated header"));
    }
    let id = std::str::from_utf8(&bytes[12..12 + id_len])
        .map_err(|_| format_err("architecture id is not valid utf-8"))?
        .to_string();
    let count = u64::from_le_bytes(bytes[12 + id_len..header_end].try_into().unwrap()) as usize;
    let expected = header_end + count * 4 + 4;
    if bytes.len() < expected {
        return Err(format_err("truncated parameter payload"));
    }
    if bytes.len() > expected {
        return Err(format_err("trailing bytes after checksum"));
    }
    let body = &bytes[..expected - 4];
    let mut crc = crc32fast::Hasher::new();
    crc.update(body);
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    if crc.finalize() != stored {
        return Err(format_err("checksum mismatch"));
    }
    let mut parameters = Vec::with_capacity(count);
    let mut offset = header_end;
    for _ in 0..count {
        parameters.push(f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()));
        offset += 4;
    }
    GeneratorHandle::from_parameters(&id, parameters, false)
}
