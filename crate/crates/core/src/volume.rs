//! 3D scalar volumes and the RVOL on-disk format.
//!
//! RVOL layout (little-endian, no padding, no compression):
//! magic `RVOL` (4 bytes), version `u32` = 1, dtype `u32` (1 = f32),
//! ndim `u32` = 3, dims 3 x `u64` in (D, H, W) order, spacing 3 x `f64`
//! in millimetres, then D*H*W f32 values row-major with W fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;

const RVOL_MAGIC: [u8; 4] = *b"RVOL";
const RVOL_VERSION: u32 = 1;
const RVOL_DTYPE_F32: u32 = 1;

/// HU-like intensity range synthetic shapes must stay within.
pub const SYNTH_INTENSITY_RANGE: (f32, f32) = (-1000.0, 1000.0);

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic: expected \"RVOL\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported RVOL version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0} (only 1 = f32)")]
    UnsupportedDtype(u32),
    #[error("unsupported ndim {0} (only 3)")]
    UnsupportedNdim(u32),
    #[error("file truncated: needed {needed} more bytes for {what}")]
    TruncatedFile { what: &'static str, needed: usize },
    #[error("dimension overflow or zero dim: dims ({0}, {1}, {2})")]
    DimOverflow(u64, u64, u64),
    #[error("bad clip range: lo {lo} must be < hi {hi}")]
    BadRange { lo: f32, hi: f32 },
    #[error("crop out of bounds: origin {origin:?} + size {size:?} exceeds dims {dims:?}")]
    OutOfBounds {
        origin: (usize, usize, usize),
        size: (usize, usize, usize),
        dims: (usize, usize, usize),
    },
    #[error("bad synth spec: {0}")]
    BadSpec(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Dense 3D scalar field indexed `[depth][height][width]`, width fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing_mm: (f64, f64, f64), data: Vec<f32>) -> Self {
        assert!(dims.0 >= 1 && dims.1 >= 1 && dims.2 >= 1, "zero dim");
        assert_eq!(data.len(), dims.0 * dims.1 * dims.2, "data length");
        Volume {
            dims,
            spacing_mm,
            data,
        }
    }

    pub fn filled(dims: (usize, usize, usize), value: f32) -> Self {
        Volume::new(dims, (1.0, 1.0, 1.0), vec![value; dims.0 * dims.1 * dims.2])
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[(d * self.dims.1 + h) * self.dims.2 + w]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: f32) {
        self.data[(d * self.dims.1 + h) * self.dims.2 + w] = v;
    }
}

/// Per-transform application probabilities and parameter ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub p_flip: f64,
    pub p_rotate90: f64,
    pub p_intensity_scale: f64,
    pub p_intensity_shift: f64,
    pub scale_range: (f64, f64),
    pub shift_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_flip: 0.5,
            p_rotate90: 0.3,
            p_intensity_scale: 0.1,
            p_intensity_shift: 0.1,
            scale_range: (0.9, 1.1),
            shift_range: (-0.1, 0.1),
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            p_flip: 0.0,
            p_rotate90: 0.0,
            p_intensity_scale: 0.0,
            p_intensity_shift: 0.0,
            scale_range: (1.0, 1.0),
            shift_range: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let probs = [
            self.p_flip,
            self.p_rotate90,
            self.p_intensity_scale,
            self.p_intensity_shift,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(VolumeError::BadSpec(
                "augment probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(VolumeError::BadSpec("scale_range must be positive".into()));
        }
        if self.shift_range.1 < self.shift_range.0 {
            return Err(VolumeError::BadSpec("shift_range reversed".into()));
        }
        Ok(())
    }
}

/// Primitive painted into a synthetic volume. Later entries win on overlap.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum SynthShape {
    /// Solid ball; center and radius in voxel units.
    Sphere {
        center: (f64, f64, f64),
        radius: f64,
        intensity: f32,
    },
    /// Axis-aligned box with inclusive-exclusive voxel bounds.
    Box {
        min: (usize, usize, usize),
        max: (usize, usize, usize),
        intensity: f32,
    },
    /// Axis-aligned cylinder spanning the full extent of `axis` (0=d,1=h,2=w).
    Tube {
        axis: usize,
        center: (f64, f64),
        radius: f64,
        intensity: f32,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub shapes: Vec<SynthShape>,
    /// Std-dev of additive Gaussian noise in intensity units; 0 disables.
    #[serde(default)]
    pub noise_std: f64,
}

// ---------------------------------------------------------------------------
// RVOL I/O
// ---------------------------------------------------------------------------

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), VolumeError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(VolumeError::TruncatedFile {
                what,
                needed: buf.len() - filled,
            });
        }
        filled += n;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, VolumeError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64, VolumeError> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &'static str) -> Result<f64, VolumeError> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

pub fn load_rvol(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != RVOL_MAGIC {
        return Err(VolumeError::BadMagic { found: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != RVOL_VERSION {
        return Err(VolumeError::UnsupportedVersion(version));
    }
    let dtype = read_u32(&mut r, "dtype")?;
    if dtype != RVOL_DTYPE_F32 {
        return Err(VolumeError::UnsupportedDtype(dtype));
    }
    let ndim = read_u32(&mut r, "ndim")?;
    if ndim != 3 {
        return Err(VolumeError::UnsupportedNdim(ndim));
    }
    let d = read_u64(&mut r, "dims")?;
    let h = read_u64(&mut r, "dims")?;
    let w = read_u64(&mut r, "dims")?;
    let count = d
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .filter(|&n| n > 0 && n <= usize::MAX as u64 / 4)
        .ok_or(VolumeError::DimOverflow(d, h, w))?;
    let spacing = (
        read_f64(&mut r, "spacing")?,
        read_f64(&mut r, "spacing")?,
        read_f64(&mut r, "spacing")?,
    );

    let mut payload = vec![0u8; count as usize * 4];
    read_exact_or(&mut r, &mut payload, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    Ok(Volume::new(
        (d as usize, h as usize, w as usize),
        spacing,
        data,
    ))
}

pub fn save_rvol(v: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&RVOL_MAGIC)?;
    w.write_all(&RVOL_VERSION.to_le_bytes())?;
    w.write_all(&RVOL_DTYPE_F32.to_le_bytes())?;
    w.write_all(&3u32.to_le_bytes())?;
    w.write_all(&(v.dims.0 as u64).to_le_bytes())?;
    w.write_all(&(v.dims.1 as u64).to_le_bytes())?;
    w.write_all(&(v.dims.2 as u64).to_le_bytes())?;
    w.write_all(&v.spacing_mm.0.to_le_bytes())?;
    w.write_all(&v.spacing_mm.1.to_le_bytes())?;
    w.write_all(&v.spacing_mm.2.to_le_bytes())?;
    for &x in &v.data {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Preprocessing, cropping, synthesis
// ---------------------------------------------------------------------------

/// Clip intensities to `[clip_lo, clip_hi]` and rescale to [0, 1].
pub fn preprocess(v: &Volume, clip_lo: f32, clip_hi: f32) -> Result<Volume, VolumeError> {
    if clip_lo >= clip_hi {
        return Err(VolumeError::BadRange {
            lo: clip_lo,
            hi: clip_hi,
        });
    }
    let span = clip_hi - clip_lo;
    let data = v
        .data
        .iter()
        .map(|&x| (x.clamp(clip_lo, clip_hi) - clip_lo) / span)
        .collect();
    Ok(Volume {
        dims: v.dims,
        spacing_mm: v.spacing_mm,
        data,
    })
}

/// The CT window used for pre-training inputs.
pub const DEFAULT_CLIP: (f32, f32) = (-175.0, 250.0);

pub fn crop_subvolume(
    v: &Volume,
    origin: (usize, usize, usize),
    size: (usize, usize, usize),
) -> Result<Volume, VolumeError> {
    let (d0, h0, w0) = origin;
    let (sd, sh, sw) = size;
    if sd == 0
        || sh == 0
        || sw == 0
        || d0 + sd > v.dims.0
        || h0 + sh > v.dims.1
        || w0 + sw > v.dims.2
    {
        return Err(VolumeError::OutOfBounds {
            origin,
            size,
            dims: v.dims,
        });
    }
    let mut data = Vec::with_capacity(sd * sh * sw);
    for d in 0..sd {
        for h in 0..sh {
            let base = ((d0 + d) * v.dims.1 + (h0 + h)) * v.dims.2 + w0;
            data.extend_from_slice(&v.data[base..base + sw]);
        }
    }
    Ok(Volume::new(size, v.spacing_mm, data))
}

/// Paint shapes over a uniform -1000 background, then add seeded noise.
pub fn synth_volume(
    spec: &SynthSpec,
    dims: (usize, usize, usize),
    seed: u64,
) -> Result<Volume, VolumeError> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(VolumeError::BadSpec("dims must be positive".into()));
    }
    let (lo, hi) = SYNTH_INTENSITY_RANGE;
    for s in &spec.shapes {
        let (intensity, ok) = match s {
            SynthShape::Sphere {
                radius, intensity, ..
            } => (*intensity, *radius > 0.0),
            SynthShape::Box {
                min,
                max,
                intensity,
            } => (
                *intensity,
                min.0 < max.0
                    && min.1 < max.1
                    && min.2 < max.2
                    && max.0 <= dims.0
                    && max.1 <= dims.1
                    && max.2 <= dims.2,
            ),
            SynthShape::Tube {
                axis,
                radius,
                intensity,
                ..
            } => (*intensity, *axis < 3 && *radius > 0.0),
        };
        if !ok {
            return Err(VolumeError::BadSpec(format!("degenerate shape {s:?}")));
        }
        if !(lo..=hi).contains(&intensity) {
            return Err(VolumeError::BadSpec(format!(
                "intensity {intensity} outside [{lo}, {hi}]"
            )));
        }
    }

    let mut vol = Volume::filled(dims, lo);
    vol.spacing_mm = (1.5, 1.5, 1.5);
    for s in &spec.shapes {
        match *s {
            SynthShape::Sphere {
                center,
                radius,
                intensity,
            } => {
                let r2 = radius * radius;
                for d in 0..dims.0 {
                    for h in 0..dims.1 {
                        for w in 0..dims.2 {
                            let dd = d as f64 - center.0;
                            let dh = h as f64 - center.1;
                            let dw = w as f64 - center.2;
                            if dd * dd + dh * dh + dw * dw <= r2 {
                                vol.set(d, h, w, intensity);
                            }
                        }
                    }
                }
            }
            SynthShape::Box {
                min,
                max,
                intensity,
            } => {
                for d in min.0..max.0 {
                    for h in min.1..max.1 {
                        for w in min.2..max.2 {
                            vol.set(d, h, w, intensity);
                        }
                    }
                }
            }
            SynthShape::Tube {
                axis,
                center,
                radius,
                intensity,
            } => {
                let r2 = radius * radius;
                for d in 0..dims.0 {
                    for h in 0..dims.1 {
                        for w in 0..dims.2 {
                            let (a, b) = match axis {
                                0 => (h as f64, w as f64),
                                1 => (d as f64, w as f64),
                                _ => (d as f64, h as f64),
                            };
                            let da = a - center.0;
                            let db = b - center.1;
                            if da * da + db * db <= r2 {
                                vol.set(d, h, w, intensity);
                            }
                        }
                    }
                }
            }
        }
    }

    if spec.noise_std > 0.0 {
        let mut rng = SeededRng::new(seed);
        for x in &mut vol.data {
            *x = (*x + (rng.normal() * spec.noise_std) as f32).clamp(lo, hi);
        }
    }
    Ok(vol)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Reverse the volume along one axis (0 = depth, 1 = height, 2 = width).
pub fn flip(v: &Volume, axis: usize) -> Volume {
    let (nd, nh, nw) = v.dims;
    let mut out = v.clone();
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let (sd, sh, sw) = match axis {
                    0 => (nd - 1 - d, h, w),
                    1 => (d, nh - 1 - h, w),
                    _ => (d, h, nw - 1 - w),
                };
                out.set(d, h, w, v.at(sd, sh, sw));
            }
        }
    }
    out
}

/// Rotate by `quarter_turns` x 90 degrees in the plane of `axes`
/// (a pair out of {0,1,2}); the remaining axis is unchanged.
pub fn rotate90(v: &Volume, axes: (usize, usize), quarter_turns: usize) -> Volume {
    assert!(
        axes.0 < 3 && axes.1 < 3 && axes.0 != axes.1,
        "bad axis pair"
    );
    let mut cur = v.clone();
    for _ in 0..quarter_turns % 4 {
        cur = rotate_quarter(&cur, axes);
    }
    cur
}

fn rotate_quarter(v: &Volume, (a, b): (usize, usize)) -> Volume {
    let dims = [v.dims.0, v.dims.1, v.dims.2];
    let mut out_dims = dims;
    out_dims[a] = dims[b];
    out_dims[b] = dims[a];
    let mut out = Volume::filled((out_dims[0], out_dims[1], out_dims[2]), 0.0);
    out.spacing_mm = v.spacing_mm;
    for d in 0..out_dims[0] {
        for h in 0..out_dims[1] {
            for w in 0..out_dims[2] {
                let idx = [d, h, w];
                // (i, j) in the rotated plane came from (j, n_i_out - 1 - i).
                let mut src = idx;
                src[a] = idx[b];
                src[b] = out_dims[a] - 1 - idx[a];
                out.set(d, h, w, v.at(src[0], src[1], src[2]));
            }
        }
    }
    out
}

/// Apply each transform independently with its policy probability.
/// Input must already be normalised to [0, 1]; output is clamped back.
pub fn augment(v: &Volume, policy: &AugmentPolicy, rng: &mut SeededRng) -> Volume {
    let mut out = v.clone();
    if rng.chance(policy.p_flip) {
        let axis = rng.next_below(3);
        out = flip(&out, axis);
    }
    if rng.chance(policy.p_rotate90) {
        let pair = match rng.next_below(3) {
            0 => (0, 1),
            1 => (0, 2),
            _ => (1, 2),
        };
        let turns = 1 + rng.next_below(3);
        out = rotate90(&out, pair, turns);
    }
    if rng.chance(policy.p_intensity_scale) {
        let s = rng.uniform(policy.scale_range.0, policy.scale_range.1) as f32;
        for x in &mut out.data {
            *x = (*x * s).clamp(0.0, 1.0);
        }
    }
    if rng.chance(policy.p_intensity_shift) {
        let t = rng.uniform(policy.shift_range.0, policy.shift_range.1) as f32;
        for x in &mut out.data {
            *x = (*x + t).clamp(0.0, 1.0);
        }
    }
    out
}
