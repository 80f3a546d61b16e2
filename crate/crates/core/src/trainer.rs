//! Pre-training loop: deterministic batch assembly, AdamW with decoupled
//! weight decay, warmup-cosine learning rate, metric tracing, and bit-exact
//! checkpointing.
//!
//! Checkpoint layout (little-endian): magic `HEMC`, version `u32` = 1,
//! header length `u64`, UTF-8 JSON header (config echo, blob manifest with
//! name/shape/offset, RNG state, step counter), then raw f32 blobs in
//! manifest order: every parameter, then the optimizer's first and second
//! moments per parameter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, Tensor};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::matrix::Matrix;
use crate::model::{ForwardOpts, MaeModel, ModelError};
use crate::rng::SeededRng;
use crate::tokenizer::{patchify, sample_mask, TokenError};
use crate::volume::{
    augment, crop_subvolume, load_rvol, preprocess, synth_volume, AugmentPolicy, SynthShape,
    SynthSpec, Volume, VolumeError, DEFAULT_CLIP,
};

const CKPT_MAGIC: [u8; 4] = *b"HEMC";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("data source is empty")]
    DataEmpty,
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f32 },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("empty mask (mask_ratio 0 leaves nothing to reconstruct)")]
    EmptyMask,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::EmptyMask => TrainError::EmptyMask,
            other => TrainError::Model(ModelError::Graph(other)),
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(
        "shape mismatch on load for parameter {name}: checkpoint {found:?}, model {expected:?}"
    )]
    ShapeMismatchOnLoad {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Where training volumes come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataSource {
    /// Deterministically generated shape volumes.
    Synth {
        count: usize,
        dims: (usize, usize, usize),
        seed: u64,
    },
    /// Directory of `.rvol` files, loaded in sorted filename order.
    RvolDir { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub crop: (usize, usize, usize),
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default = "AugmentPolicy::default")]
    pub augment: AugmentPolicy,
    pub data: DataSource,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps >= self.total_steps {
            return Err(TrainError::BadConfig(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.base_lr <= 0.0 {
            return Err(TrainError::BadConfig("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(TrainError::BadConfig(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::BadConfig("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("weight_decay must be >= 0".into()));
        }
        self.encoder.validate().map_err(TrainError::BadConfig)?;
        self.decoder
            .validate(&self.encoder.tap_layers)
            .map_err(TrainError::BadConfig)?;
        if !self.crop.0.is_multiple_of(self.encoder.patch_size)
            || !self.crop.1.is_multiple_of(self.encoder.patch_size)
            || !self.crop.2.is_multiple_of(self.encoder.patch_size)
        {
            return Err(TrainError::BadConfig(format!(
                "crop {:?} not divisible by patch size {}",
                self.crop, self.encoder.patch_size
            )));
        }
        self.augment
            .validate()
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        Ok(())
    }

    /// The sanctioned full-scale settings, documented for reference; the
    /// desk defaults used in tests and the bundled config are far smaller.
    pub fn full_scale_reference() -> &'static str {
        "full-scale: 400k steps, 4k warmup, lr 1e-4, weight decay 0.05, \
         betas 0.9/0.95, batch 192, mask ratio 0.75, 96^3 crops"
    }
}

/// Linear warmup from zero to `base_lr`, then cosine decay to zero.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    debug_assert!(step <= cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    if span == 0.0 {
        return 0.0;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-parameter AdamW state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

pub const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn for_model(model: &MaeModel<f32>) -> Self {
        let m = model
            .params
            .iter()
            .map(|p| vec![0.0f32; p.values.len()])
            .collect();
        let v = model
            .params
            .iter()
            .map(|p| vec![0.0f32; p.values.len()])
            .collect();
        OptimizerState { m, v, t: 0 }
    }
}

/// Bias-corrected Adam update with decoupled weight decay. Decay applies
/// only to rank >= 2 parameters, which exempts every bias, layer-norm gain
/// and the mask token.
pub fn adamw_step(
    model: &mut MaeModel<f32>,
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
) -> Result<(), TrainError> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (beta1 as f32, beta2 as f32);
    let (ib1, ib2) = ((1.0 - beta1) as f32, (1.0 - beta2) as f32);
    let lr_f = lr as f32;
    let inv_bc1 = (1.0 / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let eps = ADAM_EPS as f32;

    for (pi, param) in model.params.iter_mut().enumerate() {
        let g = &grads[pi];
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGrad(param.name.clone()));
        }
        let decays = param.shape.len() >= 2;
        let decay = if decays {
            (lr * weight_decay) as f32
        } else {
            0.0
        };
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for i in 0..param.values.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + ib1 * gi;
            v[i] = b2 * v[i] + ib2 * gi * gi;
            let mhat = m[i] * inv_bc1;
            let vhat = v[i] * inv_bc2;
            let p = param.values[i];
            param.values[i] = p - decay * p - lr_f * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 1-based step index.
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
}

pub fn metrics_csv_header() -> &'static str {
    "step,lr,loss"
}

pub fn metrics_csv_row(m: &StepMetrics) -> String {
    format!("{},{},{}", m.step, m.lr, m.loss)
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: MaeModel<f32>,
    pub opt: OptimizerState,
    rng: SeededRng,
    step: u64,
    data: Vec<Volume>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let data = load_dataset(&cfg)?;
        let mut rng = SeededRng::new(cfg.seed);
        let model = MaeModel::new(cfg.encoder.clone(), cfg.decoder.clone(), cfg.crop, &mut rng)?;
        let opt = OptimizerState::for_model(&model);
        Ok(Trainer {
            cfg,
            model,
            opt,
            rng,
            step: 0,
            data,
        })
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// One optimisation step over a freshly sampled batch.
    pub fn step_once(&mut self) -> Result<StepMetrics, TrainError> {
        let lr = lr_schedule(self.step, &self.cfg);
        let graph = Graph::<f32>::new();
        let leaves = self.model.bind(&graph);
        let n = self.model.token_count();

        let mut losses: Vec<Tensor<f32>> = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let tokens = self.next_sample_tokens()?;
            let plan = sample_mask(n, self.cfg.mask_ratio, &mut self.rng)?;
            let fwd = self
                .model
                .forward_sample(&graph, &leaves, &tokens, &plan, ForwardOpts::default())
                .map_err(|e| match e {
                    ModelError::Graph(GraphError::EmptyMask) => TrainError::EmptyMask,
                    other => TrainError::Model(other),
                })?;
            losses.push(fwd.loss.expect("loss requested"));
        }
        let loss = Tensor::concat(&losses, 0)?.mean();
        let loss_value = loss.item();
        let display_step = self.step + 1;
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: display_step,
                value: loss_value,
            });
        }
        loss.backward()?;
        let grads: Vec<Vec<f32>> = leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect();
        adamw_step(
            &mut self.model,
            &grads,
            &mut self.opt,
            lr,
            self.cfg.weight_decay,
            self.cfg.beta1,
            self.cfg.beta2,
        )?;
        self.step += 1;
        Ok(StepMetrics {
            step: display_step,
            lr,
            loss: loss_value,
        })
    }

    /// Run until `total_steps`, reporting each step's metrics.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics)) -> Result<(), TrainError> {
        while self.step < self.cfg.total_steps {
            let metrics = self.step_once()?;
            on_step(&metrics);
        }
        Ok(())
    }

    /// Crop, augment and patchify the next training sample.
    fn next_sample_tokens(&mut self) -> Result<Matrix<f32>, TrainError> {
        if self.data.is_empty() {
            return Err(TrainError::DataEmpty);
        }
        let vi = self.rng.next_below(self.data.len());
        let vol = &self.data[vi];
        let crop = self.cfg.crop;
        let origin = (
            self.rng.next_below(vol.dims.0 - crop.0 + 1),
            self.rng.next_below(vol.dims.1 - crop.1 + 1),
            self.rng.next_below(vol.dims.2 - crop.2 + 1),
        );
        let cropped = crop_subvolume(vol, origin, crop)?;
        let augmented = augment(&cropped, &self.cfg.augment, &mut self.rng);
        let (_, tokens) = patchify(&augmented, self.cfg.encoder.patch_size)?;
        Ok(tokens)
    }

    /// Deterministic loss probe on a synthetic sample, independent of the
    /// training RNG stream. Used to compare model states bitwise.
    pub fn probe_forward(&self, probe_seed: u64) -> Result<f32, TrainError> {
        let mut rng = SeededRng::new(probe_seed);
        let vol = probe_volume(self.cfg.crop, probe_seed)?;
        let pre = preprocess(&vol, DEFAULT_CLIP.0, DEFAULT_CLIP.1)?;
        let (_, tokens) = patchify(&pre, self.cfg.encoder.patch_size)?;
        let n = self.model.token_count();
        let gamma = if self.cfg.mask_ratio > 0.0 {
            self.cfg.mask_ratio
        } else {
            0.5
        };
        let plan = sample_mask(n, gamma, &mut rng)?;
        let graph = Graph::<f32>::new();
        let leaves = self.model.bind(&graph);
        let fwd =
            self.model
                .forward_sample(&graph, &leaves, &tokens, &plan, ForwardOpts::default())?;
        Ok(fwd.loss.expect("loss requested").item())
    }

    // -- checkpointing -------------------------------------------------------

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut manifest = Vec::new();
        let mut offset = 0u64;
        let mut push =
            |name: String, shape: Vec<usize>, len: usize, manifest: &mut Vec<BlobEntry>| {
                manifest.push(BlobEntry {
                    name,
                    shape,
                    offset,
                });
                offset += (len * 4) as u64;
            };
        for p in self.model.params.iter() {
            push(
                p.name.clone(),
                p.shape.clone(),
                p.values.len(),
                &mut manifest,
            );
        }
        for (pi, p) in self.model.params.iter().enumerate() {
            push(
                format!("optim.m.{}", p.name),
                p.shape.clone(),
                self.opt.m[pi].len(),
                &mut manifest,
            );
        }
        for (pi, p) in self.model.params.iter().enumerate() {
            push(
                format!("optim.v.{}", p.name),
                p.shape.clone(),
                self.opt.v[pi].len(),
                &mut manifest,
            );
        }
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            step: self.step,
            optimizer_t: self.opt.t,
            rng_state: self.rng.state(),
            manifest,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())?;
        w.write_all(&header_json)?;
        for p in self.model.params.iter() {
            write_f32_blob(&mut w, &p.values)?;
        }
        for m in &self.opt.m {
            write_f32_blob(&mut w, m)?;
        }
        for v in &self.opt.v {
            write_f32_blob(&mut w, v)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Restore a trainer from a checkpoint using its embedded config.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer, TrainError> {
        let (header, blobs) = read_checkpoint(path.as_ref())?;
        Trainer::restore(header, blobs, None)
    }

    /// Restore against an externally supplied config; model shapes must
    /// match the checkpoint manifest.
    pub fn resume_with_config(
        path: impl AsRef<Path>,
        cfg: TrainConfig,
    ) -> Result<Trainer, TrainError> {
        let (header, blobs) = read_checkpoint(path.as_ref())?;
        Trainer::restore(header, blobs, Some(cfg))
    }

    fn restore(
        header: CheckpointHeader,
        blobs: Vec<u8>,
        override_cfg: Option<TrainConfig>,
    ) -> Result<Trainer, TrainError> {
        let cfg = override_cfg.unwrap_or_else(|| header.config.clone());
        cfg.validate()?;
        let data = load_dataset(&cfg)?;
        // Parameter topology comes from the config; values are overwritten
        // below, so the init stream is discarded.
        let mut init_rng = SeededRng::new(cfg.seed);
        let mut model = MaeModel::new(
            cfg.encoder.clone(),
            cfg.decoder.clone(),
            cfg.crop,
            &mut init_rng,
        )?;
        let mut opt = OptimizerState::for_model(&model);
        opt.t = header.optimizer_t;

        let n_params = model.params.len();
        if header.manifest.len() != 3 * n_params {
            return Err(CheckpointError::BadHeader(format!(
                "manifest has {} blobs, model expects {}",
                header.manifest.len(),
                3 * n_params
            ))
            .into());
        }
        for (pi, entry) in header.manifest.iter().enumerate() {
            let (expected_name, expected_shape, dest): (String, Vec<usize>, &mut [f32]) =
                if pi < n_params {
                    let p = model.params.get_mut(pi);
                    (p.name.clone(), p.shape.clone(), &mut p.values)
                } else if pi < 2 * n_params {
                    let idx = pi - n_params;
                    let p = model.params.get(idx);
                    (
                        format!("optim.m.{}", p.name),
                        p.shape.clone(),
                        &mut opt.m[idx],
                    )
                } else {
                    let idx = pi - 2 * n_params;
                    let p = model.params.get(idx);
                    (
                        format!("optim.v.{}", p.name),
                        p.shape.clone(),
                        &mut opt.v[idx],
                    )
                };
            if entry.name != expected_name || entry.shape != expected_shape {
                return Err(CheckpointError::ShapeMismatchOnLoad {
                    name: expected_name,
                    found: entry.shape.clone(),
                    expected: expected_shape,
                }
                .into());
            }
            let start = entry.offset as usize;
            let end = start + dest.len() * 4;
            if end > blobs.len() {
                return Err(CheckpointError::BadHeader(format!(
                    "blob for {} overruns payload",
                    entry.name
                ))
                .into());
            }
            for (i, chunk) in blobs[start..end].chunks_exact(4).enumerate() {
                dest[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }

        Ok(Trainer {
            cfg,
            model,
            opt,
            rng: SeededRng::from_state(header.rng_state),
            step: header.step,
            data,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    step: u64,
    optimizer_t: u64,
    rng_state: [u64; 4],
    manifest: Vec<BlobEntry>,
}

fn write_f32_blob(w: &mut impl Write, values: &[f32]) -> Result<(), CheckpointError> {
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<u8>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != CKPT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let mut blobs = Vec::new();
    r.read_to_end(&mut blobs)?;
    Ok((header, blobs))
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

fn load_dataset(cfg: &TrainConfig) -> Result<Vec<Volume>, TrainError> {
    let raw = match &cfg.data {
        DataSource::Synth { count, dims, seed } => {
            if *count == 0 {
                return Err(TrainError::DataEmpty);
            }
            (0..*count)
                .map(|i| synth_training_volume(*dims, seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>, _>>()?
        }
        DataSource::RvolDir { path } => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(VolumeError::IoFailure)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "rvol"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(TrainError::DataEmpty);
            }
            files.iter().map(load_rvol).collect::<Result<Vec<_>, _>>()?
        }
    };
    // Window and normalise once; crops and augmentations are pointwise-safe
    // afterwards.
    raw.iter()
        .map(|v| {
            if v.dims.0 < cfg.crop.0 || v.dims.1 < cfg.crop.1 || v.dims.2 < cfg.crop.2 {
                return Err(TrainError::BadConfig(format!(
                    "volume dims {:?} smaller than crop {:?}",
                    v.dims, cfg.crop
                )));
            }
            Ok(preprocess(v, DEFAULT_CLIP.0, DEFAULT_CLIP.1)?)
        })
        .collect()
}

/// Randomised multi-shape volume for synthetic pre-training data: a bright
/// body centred in the field with a few satellites and an axial tube.
/// Centred geometry keeps the field statistics nearly invariant under the
/// flip/rotate augmentations.
pub fn synth_training_volume(
    dims: (usize, usize, usize),
    seed: u64,
) -> Result<Volume, VolumeError> {
    let mut rng = SeededRng::new(seed);
    let mind = dims.0.min(dims.1).min(dims.2) as f64;
    let centre = (
        (dims.0 as f64 - 1.0) / 2.0,
        (dims.1 as f64 - 1.0) / 2.0,
        (dims.2 as f64 - 1.0) / 2.0,
    );
    let mut shapes = Vec::new();
    shapes.push(SynthShape::Sphere {
        center: centre,
        radius: rng.uniform(0.3, 0.42) * mind,
        intensity: rng.uniform(60.0, 240.0) as f32,
    });
    let n_satellites = 1 + rng.next_below(3);
    for _ in 0..n_satellites {
        shapes.push(SynthShape::Sphere {
            center: (
                rng.uniform(0.3, 0.7) * dims.0 as f64,
                rng.uniform(0.3, 0.7) * dims.1 as f64,
                rng.uniform(0.3, 0.7) * dims.2 as f64,
            ),
            radius: rng.uniform(0.08, 0.16) * mind,
            intensity: rng.uniform(-100.0, 220.0) as f32,
        });
    }
    if rng.chance(0.7) {
        shapes.push(SynthShape::Tube {
            axis: rng.next_below(3),
            center: (centre.0, centre.2),
            radius: rng.uniform(0.05, 0.1) * mind,
            intensity: rng.uniform(100.0, 250.0) as f32,
        });
    }
    let spec = SynthSpec {
        shapes,
        noise_std: 10.0,
    };
    synth_volume(&spec, dims, seed ^ 0x5eed)
}

fn probe_volume(dims: (usize, usize, usize), seed: u64) -> Result<Volume, VolumeError> {
    synth_training_volume(dims, seed.wrapping_mul(0x9e37_79b9))
}
