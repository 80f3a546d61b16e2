//! Volume patchification, mask sampling, 3D sin-cos positional embeddings
//! and visible/full gather-scatter on plain token matrices.
//!
//! Token order is (d, h, w) row-major everywhere: patch index `p` walks the
//! patch grid with w fastest, and voxels inside a patch are laid out the
//! same way.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::matrix::Matrix;
use crate::rng::SeededRng;
use crate::volume::Volume;

#[derive(Debug, Error)]
pub enum TokenError {
    #[error("volume dims {dims:?} not divisible by patch size {patch}")]
    IndivisibleDims {
        dims: (usize, usize, usize),
        patch: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask ratio {0} outside [0, 1)")]
    BadRatio(f64),
    #[error("embedding dim {0} not divisible by 6")]
    BadDim(usize),
    #[error("index {index} out of range for {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Regular grid of cubic patches covering a volume exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    /// Patch side length in voxels.
    pub patch: usize,
    /// Patch counts per axis, (Gd, Gh, Gw).
    pub grid: (usize, usize, usize),
}

impl PatchGrid {
    pub fn for_dims(dims: (usize, usize, usize), patch: usize) -> Result<Self, TokenError> {
        if patch == 0
            || !dims.0.is_multiple_of(patch)
            || !dims.1.is_multiple_of(patch)
            || !dims.2.is_multiple_of(patch)
        {
            return Err(TokenError::IndivisibleDims { dims, patch });
        }
        Ok(PatchGrid {
            patch,
            grid: (dims.0 / patch, dims.1 / patch, dims.2 / patch),
        })
    }

    /// Total token count N = Gd * Gh * Gw.
    pub fn token_count(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    /// Voxels per token, P^3.
    pub fn patch_volume(&self) -> usize {
        self.patch * self.patch * self.patch
    }

    pub fn volume_dims(&self) -> (usize, usize, usize) {
        (
            self.grid.0 * self.patch,
            self.grid.1 * self.patch,
            self.grid.2 * self.patch,
        )
    }

    /// Grid coordinate of token `p` in (d, h, w) order.
    pub fn coords(&self, p: usize) -> (usize, usize, usize) {
        let (_, gh, gw) = self.grid;
        (p / (gh * gw), (p / gw) % gh, p % gw)
    }
}

/// Partition of token indices into visible and masked sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub gamma: f64,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
}

impl MaskPlan {
    pub fn token_count(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    pub fn visible_count(&self) -> usize {
        self.visible_idx.len()
    }

    /// All-visible plan (gamma = 0).
    pub fn all_visible(n: usize) -> Self {
        MaskPlan {
            gamma: 0.0,
            visible_idx: (0..n).collect(),
            masked_idx: Vec::new(),
        }
    }
}

/// Fixed sin-cos positional table, one row per token.
#[derive(Debug, Clone)]
pub struct PosEmbed3D {
    pub dim: usize,
    /// Row-major `N x dim`, f64 so both precisions derive from one table.
    pub table: Matrix<f64>,
}

/// Cut a volume into `N x P^3` patch rows.
pub fn patchify(v: &Volume, patch: usize) -> Result<(PatchGrid, Matrix<f32>), TokenError> {
    let grid = PatchGrid::for_dims(v.dims, patch)?;
    let n = grid.token_count();
    let pv = grid.patch_volume();
    let mut out = Matrix::zeros(n, pv);
    let (gd, gh, gw) = grid.grid;
    let mut row = 0;
    for pd in 0..gd {
        for ph in 0..gh {
            for pw in 0..gw {
                let dst = out.row_mut(row);
                let mut t = 0;
                for dd in 0..patch {
                    for hh in 0..patch {
                        let d = pd * patch + dd;
                        let h = ph * patch + hh;
                        let w0 = pw * patch;
                        let base = (d * v.dims.1 + h) * v.dims.2 + w0;
                        dst[t..t + patch].copy_from_slice(&v.data[base..base + patch]);
                        t += patch;
                    }
                }
                row += 1;
            }
        }
    }
    Ok((grid, out))
}

/// Exact inverse of [`patchify`]. Spacing metadata is set to unit spacing.
pub fn unpatchify(tokens: &Matrix<f32>, grid: &PatchGrid) -> Result<Volume, TokenError> {
    if tokens.rows != grid.token_count() || tokens.cols != grid.patch_volume() {
        return Err(TokenError::ShapeMismatch(format!(
            "tokens {}x{} vs grid N={} P^3={}",
            tokens.rows,
            tokens.cols,
            grid.token_count(),
            grid.patch_volume()
        )));
    }
    let dims = grid.volume_dims();
    let mut vol = Volume::filled(dims, 0.0);
    let patch = grid.patch;
    let (gd, gh, gw) = grid.grid;
    let mut row = 0;
    for pd in 0..gd {
        for ph in 0..gh {
            for pw in 0..gw {
                let src = tokens.row(row);
                let mut t = 0;
                for dd in 0..patch {
                    for hh in 0..patch {
                        let d = pd * patch + dd;
                        let h = ph * patch + hh;
                        let w0 = pw * patch;
                        let base = (d * dims.1 + h) * dims.2 + w0;
                        vol.data[base..base + patch].copy_from_slice(&src[t..t + patch]);
                        t += patch;
                    }
                }
                row += 1;
            }
        }
    }
    Ok(vol)
}

/// Uniformly random visible/masked partition via a seeded Fisher-Yates
/// shuffle. Visible count is `N - floor(gamma * N)`, so gamma < 1 always
/// leaves at least one visible token.
pub fn sample_mask(n: usize, gamma: f64, rng: &mut SeededRng) -> Result<MaskPlan, TokenError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(TokenError::BadRatio(gamma));
    }
    if n == 0 {
        return Err(TokenError::ShapeMismatch("empty token set".into()));
    }
    let masked_count = (gamma * n as f64).floor() as usize;
    let visible_count = n - masked_count;
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut visible_idx = idx[..visible_count].to_vec();
    let mut masked_idx = idx[visible_count..].to_vec();
    visible_idx.sort_unstable();
    masked_idx.sort_unstable();
    Ok(MaskPlan {
        gamma,
        visible_idx,
        masked_idx,
    })
}

/// Fixed 3D sin-cos table: the embedding is split into three equal axis
/// blocks; block entries interleave sin and cos of (coordinate * omega_k)
/// with omega_k = 1 / 10000^(2k / (dim/3)).
pub fn pos_embed_3d(grid: &PatchGrid, dim: usize) -> Result<PosEmbed3D, TokenError> {
    if dim == 0 || !dim.is_multiple_of(6) {
        return Err(TokenError::BadDim(dim));
    }
    let n = grid.token_count();
    let axis_dim = dim / 3;
    let pairs = axis_dim / 2;
    let omegas: Vec<f64> = (0..pairs)
        .map(|k| 1.0 / 10000f64.powf(2.0 * k as f64 / axis_dim as f64))
        .collect();
    let mut table = Matrix::zeros(n, dim);
    for p in 0..n {
        let (d, h, w) = grid.coords(p);
        let row = table.row_mut(p);
        for (axis, coord) in [d as f64, h as f64, w as f64].into_iter().enumerate() {
            let base = axis * axis_dim;
            for (k, &omega) in omegas.iter().enumerate() {
                let angle = coord * omega;
                row[base + 2 * k] = angle.sin();
                row[base + 2 * k + 1] = angle.cos();
            }
        }
    }
    Ok(PosEmbed3D { dim, table })
}

impl PosEmbed3D {
    /// Rows of the table for the given token indices, cast to `T`.
    pub fn rows_for<T: Real>(&self, idx: &[usize]) -> Matrix<T> {
        let mut out = Matrix::zeros(idx.len(), self.dim);
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(self.table.row(i)) {
                *o = T::from(v).unwrap();
            }
        }
        out
    }
}

/// Select visible rows in ascending index order.
pub fn gather_visible<T: Real>(
    tokens: &Matrix<T>,
    plan: &MaskPlan,
) -> Result<Matrix<T>, TokenError> {
    if plan.token_count() != tokens.rows {
        return Err(TokenError::ShapeMismatch(format!(
            "plan over {} tokens vs matrix with {} rows",
            plan.token_count(),
            tokens.rows
        )));
    }
    let mut out = Matrix::zeros(plan.visible_count(), tokens.cols);
    for (r, &i) in plan.visible_idx.iter().enumerate() {
        if i >= tokens.rows {
            return Err(TokenError::IndexOutOfRange {
                index: i,
                len: tokens.rows,
            });
        }
        out.row_mut(r).copy_from_slice(tokens.row(i));
    }
    Ok(out)
}

/// Place visible rows back at their indices, `fill_row` everywhere else.
pub fn scatter_full<T: Real>(
    visible_rows: &Matrix<T>,
    fill_row: &[T],
    plan: &MaskPlan,
) -> Result<Matrix<T>, TokenError> {
    if visible_rows.rows != plan.visible_count() {
        return Err(TokenError::ShapeMismatch(format!(
            "{} visible rows vs plan {}",
            visible_rows.rows,
            plan.visible_count()
        )));
    }
    if fill_row.len() != visible_rows.cols {
        return Err(TokenError::ShapeMismatch(format!(
            "fill row len {} vs {} cols",
            fill_row.len(),
            visible_rows.cols
        )));
    }
    let n = plan.token_count();
    let mut out = Matrix::zeros(n, visible_rows.cols);
    for r in 0..n {
        out.row_mut(r).copy_from_slice(fill_row);
    }
    for (r, &i) in plan.visible_idx.iter().enumerate() {
        if i >= n {
            return Err(TokenError::IndexOutOfRange { index: i, len: n });
        }
        out.row_mut(i).copy_from_slice(visible_rows.row(r));
    }
    Ok(out)
}
