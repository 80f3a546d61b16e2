//! ViT encoder over visible tokens with intermediate taps.
//!
//! The encoder embeds visible patches by linear projection plus 3D sin-cos
//! positional rows, runs `depth` pre-norm transformer blocks, snapshots the
//! block outputs at the configured tap layers, and applies a final layer
//! norm to the last layer only. No class token: every row is a patch.

use serde::{Deserialize, Serialize};

use crate::attention::{BlockParams, LAYER_NORM_EPS};
use crate::autodiff::{real, GraphError, Real, Tensor};
use crate::params::{ParamId, ParamSet};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: f64,
    /// 1-based layer indices whose outputs feed the decoder, ascending.
    pub tap_layers: Vec<usize>,
}

fn default_ffn_ratio() -> f64 {
    4.0
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.patch_size == 0 {
            return Err("patch_size must be positive".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !self.embed_dim.is_multiple_of(6) {
            return Err(format!(
                "embed_dim {} must be divisible by 6",
                self.embed_dim
            ));
        }
        if self.depth == 0 {
            return Err("depth must be positive".into());
        }
        if self.ffn_ratio <= 0.0 {
            return Err("ffn_ratio must be positive".into());
        }
        if self.tap_layers.is_empty() {
            return Err("tap_layers must not be empty".into());
        }
        if !self.tap_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err("tap_layers must be strictly ascending".into());
        }
        if self.tap_layers[0] < 1 || *self.tap_layers.last().unwrap() > self.depth {
            return Err(format!(
                "tap_layers {:?} out of range [1, {}]",
                self.tap_layers, self.depth
            ));
        }
        Ok(())
    }

    pub fn patch_volume(&self) -> usize {
        self.patch_size * self.patch_size * self.patch_size
    }
}

/// Per-layer visible-token snapshots: one entry per tap layer, plus the
/// layer-normed final output.
pub struct EncoderTaps<T> {
    /// `(layer, Z_l^v)` in ascending layer order, each `M x embed_dim`.
    pub taps: Vec<(usize, Tensor<T>)>,
    /// Final-layer output after layer norm, `M x embed_dim`.
    pub final_tokens: Tensor<T>,
}

impl<T: Real> EncoderTaps<T> {
    pub fn tap_for_layer(&self, layer: usize) -> Option<&Tensor<T>> {
        self.taps.iter().find(|(l, _)| *l == layer).map(|(_, t)| t)
    }
}

/// Attention internals captured during a traced forward pass.
pub struct LayerTrace<T> {
    /// 1-based layer index.
    pub layer: usize,
    /// Attention probabilities `(heads, M, M)`.
    pub probs: Tensor<T>,
    /// Value projection `M x embed_dim` (concatenated heads, pre output
    /// projection) — the layer's "attention values".
    pub values: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub cfg: EncoderConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    blocks: Vec<BlockParams>,
    final_g: ParamId,
    final_b: ParamId,
}

impl EncoderModel {
    pub fn init<T: Real>(cfg: &EncoderConfig, set: &mut ParamSet<T>, rng: &mut SeededRng) -> Self {
        let dim = cfg.embed_dim;
        let patch_w = set.register_trunc_normal(
            "encoder.patch_embed.weight",
            vec![dim, cfg.patch_volume()],
            crate::attention::INIT_STD,
            rng,
        );
        let patch_b = set.register_zeros("encoder.patch_embed.bias", vec![dim]);
        let blocks = (1..=cfg.depth)
            .map(|l| {
                BlockParams::init(
                    set,
                    &format!("encoder.block{l}"),
                    dim,
                    dim,
                    cfg.heads,
                    cfg.ffn_ratio,
                    rng,
                )
            })
            .collect();
        let final_g = set.register_ones("encoder.final_norm.gain", vec![dim]);
        let final_b = set.register_zeros("encoder.final_norm.bias", vec![dim]);
        EncoderModel {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            blocks,
            final_g,
            final_b,
        }
    }

    /// Linear patch projection plus the positional rows of the visible
    /// tokens. `pos_rows` must already be gathered to `M x embed_dim`.
    pub fn embed<T: Real>(
        &self,
        visible_patches: &Tensor<T>,
        pos_rows: &Tensor<T>,
        leaves: &[Tensor<T>],
    ) -> Result<Tensor<T>, GraphError> {
        visible_patches
            .linear(&leaves[self.patch_w], Some(&leaves[self.patch_b]))?
            .add(pos_rows)
    }

    /// Run all blocks, snapshotting tap layers; layer norm on the final
    /// output only. Pass `trace` to capture attention internals per layer.
    pub fn encode<T: Real>(
        &self,
        embedded: &Tensor<T>,
        leaves: &[Tensor<T>],
        mut trace: Option<&mut Vec<LayerTrace<T>>>,
    ) -> Result<EncoderTaps<T>, GraphError> {
        let mut x = embedded.clone();
        let mut taps = Vec::with_capacity(self.cfg.tap_layers.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = i + 1;
            let (next, attn) = block.forward_self(&x, leaves)?;
            x = next;
            if self.cfg.tap_layers.contains(&layer) {
                taps.push((layer, x.clone()));
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(LayerTrace {
                    layer,
                    probs: attn.probs,
                    values: attn.values,
                });
            }
        }
        let final_tokens = x.layer_norm(
            &leaves[self.final_g],
            &leaves[self.final_b],
            real::<T>(LAYER_NORM_EPS),
        )?;
        Ok(EncoderTaps { taps, final_tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::matrix::Matrix;
    use crate::tokenizer::{pos_embed_3d, sample_mask, PatchGrid};

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            patch_size: 2,
            embed_dim: 12,
            depth: 3,
            heads: 2,
            ffn_ratio: 2.0,
            tap_layers: vec![1, 2],
        }
    }

    #[test]
    fn config_validation_catches_bad_taps() {
        let mut cfg = toy_cfg();
        cfg.tap_layers = vec![2, 2];
        assert!(cfg.validate().is_err());
        cfg.tap_layers = vec![4];
        assert!(cfg.validate().is_err());
        cfg.tap_layers = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_weights_embed_equals_positional_rows() {
        let cfg = toy_cfg();
        let mut set = ParamSet::<f64>::new();
        let mut rng = SeededRng::new(0);
        let model = EncoderModel::init(&cfg, &mut set, &mut rng);
        // Zero the patch projection.
        for v in &mut set.get_mut(model.patch_w).values {
            *v = 0.0;
        }
        let grid = PatchGrid {
            patch: 2,
            grid: (2, 2, 2),
        };
        let pe = pos_embed_3d(&grid, cfg.embed_dim).unwrap();
        let plan = sample_mask(8, 0.5, &mut SeededRng::new(1)).unwrap();

        let g = Graph::<f64>::new();
        let leaves = set.bind(&g);
        let m = plan.visible_count();
        let patches = g.constant(&[m, cfg.patch_volume()], vec![0.33; m * cfg.patch_volume()]);
        let pos: Matrix<f64> = pe.rows_for(&plan.visible_idx);
        let pos_t = g.constant(&[m, cfg.embed_dim], pos.data.clone());
        let out = model.embed(&patches, &pos_t, &leaves).unwrap();
        assert_eq!(out.values(), pos.data);
    }

    #[test]
    fn taps_cover_configured_layers_plus_final() {
        let cfg = toy_cfg();
        let mut set = ParamSet::<f64>::new();
        let mut rng = SeededRng::new(0);
        let model = EncoderModel::init(&cfg, &mut set, &mut rng);
        let g = Graph::<f64>::new();
        let leaves = set.bind(&g);
        let x = g.constant(&[5, 12], (0..60).map(|i| (i as f64) * 0.01).collect());
        let taps = model.encode(&x, &leaves, None).unwrap();
        assert_eq!(taps.taps.len(), 2);
        assert_eq!(taps.taps[0].0, 1);
        assert_eq!(taps.taps[1].0, 2);
        assert_eq!(taps.final_tokens.shape(), &[5, 12]);
    }

    #[test]
    fn all_visible_embed_has_grid_order_rows() {
        let cfg = toy_cfg();
        let mut set = ParamSet::<f64>::new();
        let mut rng = SeededRng::new(1);
        let model = EncoderModel::init(&cfg, &mut set, &mut rng);
        let grid = PatchGrid {
            patch: 2,
            grid: (2, 2, 2),
        };
        let pe = pos_embed_3d(&grid, cfg.embed_dim).unwrap();
        let plan = crate::tokenizer::MaskPlan::all_visible(8);
        let g = Graph::<f64>::new();
        let leaves = set.bind(&g);
        let patches = g.constant(&[8, cfg.patch_volume()], vec![0.1; 8 * cfg.patch_volume()]);
        let pos_t = g.constant(
            &[8, cfg.embed_dim],
            pe.rows_for::<f64>(&plan.visible_idx).data,
        );
        let out = model.embed(&patches, &pos_t, &leaves).unwrap();
        assert_eq!(out.shape(), &[8, cfg.embed_dim]);
        // Identical patches differ only by their positional rows, which are
        // in grid order when everything is visible.
        let ov = out.values();
        let first_delta: Vec<f64> = (0..cfg.embed_dim)
            .map(|j| ov[cfg.embed_dim + j] - ov[j])
            .collect();
        let pos_delta: Vec<f64> = (0..cfg.embed_dim)
            .map(|j| pe.table.get(1, j) - pe.table.get(0, j))
            .collect();
        for (a, b) in first_delta.iter().zip(pos_delta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_depth_tap_placement_captures_four_matrices() {
        // Twelve layers tapped at 3, 6 and 9 plus the final output.
        let cfg = EncoderConfig {
            patch_size: 1,
            embed_dim: 6,
            depth: 12,
            heads: 2,
            ffn_ratio: 1.0,
            tap_layers: vec![3, 6, 9],
        };
        let mut set = ParamSet::<f64>::new();
        let mut rng = SeededRng::new(8);
        let model = EncoderModel::init(&cfg, &mut set, &mut rng);
        let g = Graph::<f64>::new();
        let leaves = set.bind(&g);
        let x = g.constant(&[2, 6], (0..12).map(|i| (i as f64) * 0.1).collect());
        let taps = model.encode(&x, &leaves, None).unwrap();
        assert_eq!(
            taps.taps.iter().map(|(l, _)| *l).collect::<Vec<_>>(),
            vec![3, 6, 9]
        );
        assert_eq!(taps.final_tokens.shape(), &[2, 6]);
    }

    #[test]
    fn single_block_tap_is_pre_norm_final() {
        let cfg = EncoderConfig {
            depth: 1,
            tap_layers: vec![1],
            ..toy_cfg()
        };
        let mut set = ParamSet::<f64>::new();
        let mut rng = SeededRng::new(2);
        let model = EncoderModel::init(&cfg, &mut set, &mut rng);
        let g = Graph::<f64>::new();
        let leaves = set.bind(&g);
        let x = g.constant(&[3, 12], (0..36).map(|i| (i as f64) * 0.02 - 0.3).collect());
        let taps = model.encode(&x, &leaves, None).unwrap();
        // The tap is the raw block output; final is its layer norm.
        let tap = &taps.taps[0].1;
        let eps = real::<f64>(LAYER_NORM_EPS);
        let manual = tap
            .layer_norm(&leaves[model.final_g], &leaves[model.final_b], eps)
            .unwrap();
        assert_eq!(manual.values(), taps.final_tokens.values());
    }

    #[test]
    fn encode_deterministic_for_fixed_weights() {
        let cfg = toy_cfg();
        let mut set = ParamSet::<f64>::new();
        let mut rng = SeededRng::new(4);
        let model = EncoderModel::init(&cfg, &mut set, &mut rng);
        let run = || {
            let g = Graph::<f64>::new();
            let leaves = set.bind(&g);
            let x = g.constant(&[4, 12], (0..48).map(|i| (i as f64) * 0.05 - 1.0).collect());
            model
                .encode(&x, &leaves, None)
                .unwrap()
                .final_tokens
                .values()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trace_collects_every_layer() {
        let cfg = toy_cfg();
        let mut set = ParamSet::<f64>::new();
        let mut rng = SeededRng::new(4);
        let model = EncoderModel::init(&cfg, &mut set, &mut rng);
        let g = Graph::<f64>::new();
        let leaves = set.bind(&g);
        let x = g.constant(&[4, 12], (0..48).map(|i| (i as f64) * 0.03).collect());
        let mut trace = Vec::new();
        model.encode(&x, &leaves, Some(&mut trace)).unwrap();
        assert_eq!(trace.len(), cfg.depth);
        assert_eq!(trace[0].probs.shape(), &[2, 4, 4]);
        assert_eq!(trace[0].values.shape(), &[4, 12]);
    }
}
