//! Hierarchical encoder-driven dense decoder.
//!
//! The decoder always carries the full token set: projected final-layer
//! encoder tokens at visible positions, a learnable mask token everywhere
//! else, plus decoding positional rows. A prefix of self-attention blocks
//! adapts the tokens, then each cross-attention stage queries one encoder
//! tap (keys and values come from the M visible tap rows only), and a
//! linear head maps back to voxel space.
//!
//! With `n_cross = 0` the same pipeline degenerates to the self-attention
//! decoder used as the reconstruction baseline.

use serde::{Deserialize, Serialize};

use crate::attention::{BlockParams, LAYER_NORM_EPS};
use crate::autodiff::{real, GraphError, Real, Tensor};
use crate::encoder::EncoderTaps;
use crate::params::{ParamId, ParamSet};
use crate::rng::SeededRng;
use crate::tokenizer::MaskPlan;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub dec_dim: usize,
    pub heads: usize,
    /// Self-attention blocks before the first cross stage.
    #[serde(default = "default_n_self")]
    pub n_self: usize,
    /// Cross-attention stages (B).
    pub n_cross: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: f64,
    /// Encoder tap layer queried by each cross stage, in stage order.
    /// Must be a bijection onto the encoder's `tap_layers`.
    pub stage_to_tap: Vec<usize>,
}

fn default_n_self() -> usize {
    2
}

fn default_ffn_ratio() -> f64 {
    4.0
}

impl DecoderConfig {
    pub fn validate(&self, tap_layers: &[usize]) -> Result<(), String> {
        if self.dec_dim == 0 || self.heads == 0 || !self.dec_dim.is_multiple_of(self.heads) {
            return Err(format!(
                "dec_dim {} must be divisible by heads {}",
                self.dec_dim, self.heads
            ));
        }
        if !self.dec_dim.is_multiple_of(6) {
            return Err(format!("dec_dim {} must be divisible by 6", self.dec_dim));
        }
        if self.ffn_ratio <= 0.0 {
            return Err("ffn_ratio must be positive".into());
        }
        if self.stage_to_tap.len() != self.n_cross {
            return Err(format!(
                "stage_to_tap has {} entries for {} cross stages",
                self.stage_to_tap.len(),
                self.n_cross
            ));
        }
        if self.n_cross > 0 {
            let mut sorted = self.stage_to_tap.clone();
            sorted.sort_unstable();
            if sorted != tap_layers {
                return Err(format!(
                    "stage_to_tap {:?} is not a bijection onto tap_layers {:?}",
                    self.stage_to_tap, tap_layers
                ));
            }
        }
        if self.n_self + self.n_cross == 0 {
            return Err("decoder needs at least one block".into());
        }
        Ok(())
    }

    /// Same depth and width with every block a self-attention block — the
    /// decoder-driven reconstruction baseline.
    pub fn baseline_equivalent(&self) -> DecoderConfig {
        DecoderConfig {
            dec_dim: self.dec_dim,
            heads: self.heads,
            n_self: self.n_self + self.n_cross,
            n_cross: 0,
            ffn_ratio: self.ffn_ratio,
            stage_to_tap: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderModel {
    pub cfg: DecoderConfig,
    /// Shared projection of final encoder tokens into decoder width.
    input_w: ParamId,
    input_b: ParamId,
    mask_token: ParamId,
    self_blocks: Vec<BlockParams>,
    cross_blocks: Vec<BlockParams>,
    final_g: ParamId,
    final_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl DecoderModel {
    pub fn init<T: Real>(
        cfg: &DecoderConfig,
        enc_embed_dim: usize,
        patch_volume: usize,
        set: &mut ParamSet<T>,
        rng: &mut SeededRng,
    ) -> Self {
        let d = cfg.dec_dim;
        let std = crate::attention::INIT_STD;
        let input_w = set.register_trunc_normal(
            "decoder.input_proj.weight",
            vec![d, enc_embed_dim],
            std,
            rng,
        );
        let input_b = set.register_zeros("decoder.input_proj.bias", vec![d]);
        let mask_token = set.register_trunc_normal("decoder.mask_token", vec![d], std, rng);
        let self_blocks = (1..=cfg.n_self)
            .map(|i| {
                BlockParams::init(
                    set,
                    &format!("decoder.self{i}"),
                    d,
                    d,
                    cfg.heads,
                    cfg.ffn_ratio,
                    rng,
                )
            })
            .collect();
        let cross_blocks = (1..=cfg.n_cross)
            .map(|b| {
                BlockParams::init(
                    set,
                    &format!("decoder.cross{b}"),
                    d,
                    enc_embed_dim,
                    cfg.heads,
                    cfg.ffn_ratio,
                    rng,
                )
            })
            .collect();
        let final_g = set.register_ones("decoder.final_norm.gain", vec![d]);
        let final_b = set.register_zeros("decoder.final_norm.bias", vec![d]);
        let head_w =
            set.register_trunc_normal("decoder.head.weight", vec![patch_volume, d], std, rng);
        let head_b = set.register_zeros("decoder.head.bias", vec![patch_volume]);
        DecoderModel {
            cfg: cfg.clone(),
            input_w,
            input_b,
            mask_token,
            self_blocks,
            cross_blocks,
            final_g,
            final_b,
            head_w,
            head_b,
        }
    }

    /// Project the final encoder tokens, scatter them to their token
    /// positions with the mask token at masked positions, and add the
    /// decoding positional rows (`N x dec_dim`, full set).
    pub fn build_input<T: Real>(
        &self,
        taps: &EncoderTaps<T>,
        plan: &MaskPlan,
        dec_pos_full: &Tensor<T>,
        leaves: &[Tensor<T>],
    ) -> Result<Tensor<T>, GraphError> {
        let n = plan.token_count();
        let projected = taps
            .final_tokens
            .linear(&leaves[self.input_w], Some(&leaves[self.input_b]))?;
        let full = projected.scatter_rows(&leaves[self.mask_token], &plan.visible_idx, n)?;
        full.add(dec_pos_full)
    }

    /// Full decode: input build, `n_self` self stages, the cross stages in
    /// `stage_to_tap` order, final norm, linear head to `N x P^3`.
    pub fn forward<T: Real>(
        &self,
        taps: &EncoderTaps<T>,
        plan: &MaskPlan,
        dec_pos_full: &Tensor<T>,
        leaves: &[Tensor<T>],
    ) -> Result<Tensor<T>, GraphError> {
        let mut x = self.build_input(taps, plan, dec_pos_full, leaves)?;
        for block in &self.self_blocks {
            let (next, _) = block.forward_self(&x, leaves)?;
            x = next;
        }
        for (b, block) in self.cross_blocks.iter().enumerate() {
            let layer = self.cfg.stage_to_tap[b];
            let tap = taps
                .tap_for_layer(layer)
                .ok_or_else(|| GraphError::ShapeMismatch {
                    op: "cross_stage",
                    detail: format!("no encoder tap for layer {layer}"),
                })?;
            let (next, _) = block.forward_cross(&x, tap, leaves)?;
            x = next;
        }
        let eps = real::<T>(LAYER_NORM_EPS);
        let normed = x.layer_norm(&leaves[self.final_g], &leaves[self.final_b], eps)?;
        normed.linear(&leaves[self.head_w], Some(&leaves[self.head_b]))
    }

    /// Expose one cross stage for unit-level checks.
    pub fn cross_stage<T: Real>(
        &self,
        stage: usize,
        x: &Tensor<T>,
        tap: &Tensor<T>,
        leaves: &[Tensor<T>],
    ) -> Result<(Tensor<T>, Tensor<T>), GraphError> {
        let (out, attn) = self.cross_blocks[stage].forward_cross(x, tap, leaves)?;
        Ok((out, attn.probs))
    }
}

/// Mean over masked-token voxels of squared prediction error.
pub fn masked_mse<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    plan: &MaskPlan,
) -> Result<Tensor<T>, GraphError> {
    pred.masked_mse(target, &plan.masked_idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::encoder::{EncoderConfig, EncoderModel};
    use crate::tokenizer::{pos_embed_3d, sample_mask, PatchGrid};

    fn toy_setup() -> (EncoderConfig, DecoderConfig) {
        let enc = EncoderConfig {
            patch_size: 2,
            embed_dim: 12,
            depth: 2,
            heads: 2,
            ffn_ratio: 1.0,
            tap_layers: vec![1, 2],
        };
        let dec = DecoderConfig {
            dec_dim: 6,
            heads: 1,
            n_self: 1,
            n_cross: 2,
            ffn_ratio: 1.0,
            stage_to_tap: vec![2, 1],
        };
        (enc, dec)
    }

    struct Built {
        set: ParamSet<f64>,
        enc_model: EncoderModel,
        dec_model: DecoderModel,
        grid: PatchGrid,
    }

    fn build(enc: &EncoderConfig, dec: &DecoderConfig) -> Built {
        let mut set = ParamSet::<f64>::new();
        let mut rng = SeededRng::new(10);
        let enc_model = EncoderModel::init(enc, &mut set, &mut rng);
        let dec_model =
            DecoderModel::init(dec, enc.embed_dim, enc.patch_volume(), &mut set, &mut rng);
        let grid = PatchGrid {
            patch: enc.patch_size,
            grid: (2, 2, 2),
        };
        Built {
            set,
            enc_model,
            dec_model,
            grid,
        }
    }

    fn run_decode(built: &Built, plan: &MaskPlan, zero_tap_layer: Option<usize>) -> Vec<f64> {
        let g = Graph::<f64>::new();
        let leaves = built.set.bind(&g);
        let n = built.grid.token_count();
        let m = plan.visible_count();
        let pv = built.enc_model.cfg.patch_volume();
        let dim = built.enc_model.cfg.embed_dim;

        let patches = g.constant(
            &[m, pv],
            (0..m * pv).map(|i| ((i * 31 % 23) as f64) * 0.04).collect(),
        );
        let pos_enc = pos_embed_3d(&built.grid, dim).unwrap();
        let pos_rows = g.constant(&[m, dim], pos_enc.rows_for::<f64>(&plan.visible_idx).data);
        let embedded = built.enc_model.embed(&patches, &pos_rows, &leaves).unwrap();
        let mut taps = built.enc_model.encode(&embedded, &leaves, None).unwrap();

        if let Some(layer) = zero_tap_layer {
            for (l, t) in taps.taps.iter_mut() {
                if *l == layer {
                    *t = g.constant(&[m, dim], vec![0.0; m * dim]);
                }
            }
        }

        let pos_dec = pos_embed_3d(&built.grid, built.dec_model.cfg.dec_dim).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let dec_pos = g.constant(
            &[n, built.dec_model.cfg.dec_dim],
            pos_dec.rows_for::<f64>(&all).data,
        );
        let pred = built
            .dec_model
            .forward(&taps, plan, &dec_pos, &leaves)
            .unwrap();
        pred.values()
    }

    #[test]
    fn decode_output_shape_is_full_token_set() {
        let (enc, dec) = toy_setup();
        let built = build(&enc, &dec);
        for gamma in [0.0, 0.5, 0.75] {
            let plan = sample_mask(8, gamma, &mut SeededRng::new(3)).unwrap();
            let out = run_decode(&built, &plan, None);
            assert_eq!(out.len(), 8 * enc.patch_volume());
        }
    }

    #[test]
    fn decode_deterministic() {
        let (enc, dec) = toy_setup();
        let built = build(&enc, &dec);
        let plan = sample_mask(8, 0.5, &mut SeededRng::new(5)).unwrap();
        assert_eq!(
            run_decode(&built, &plan, None),
            run_decode(&built, &plan, None)
        );
    }

    #[test]
    fn zeroing_a_tap_changes_hierarchical_output_only() {
        let (enc, dec) = toy_setup();
        let built = build(&enc, &dec);
        let plan = sample_mask(8, 0.5, &mut SeededRng::new(7)).unwrap();
        let base = run_decode(&built, &plan, None);
        let zeroed = run_decode(&built, &plan, Some(1));
        assert_ne!(base, zeroed, "cross decoder must read tap 1");

        let baseline_built = build(&enc, &dec.baseline_equivalent());
        let b0 = run_decode(&baseline_built, &plan, None);
        let b1 = run_decode(&baseline_built, &plan, Some(1));
        assert_eq!(b0, b1, "baseline decoder never reads intermediate taps");
    }

    #[test]
    fn build_input_places_mask_token_everywhere_masked() {
        let (enc, dec) = toy_setup();
        let built = build(&enc, &dec);
        let plan = sample_mask(8, 0.75, &mut SeededRng::new(2)).unwrap();
        let g = Graph::<f64>::new();
        let mut set = built.set.clone();
        // Zero the input projection so visible rows project to zero and the
        // positional table contribution is removed below.
        for v in &mut set.get_mut(built.dec_model.input_w).values {
            *v = 0.0;
        }
        for v in &mut set.get_mut(built.dec_model.input_b).values {
            *v = 0.0;
        }
        let leaves = set.bind(&g);
        let m = plan.visible_count();
        let dim = enc.embed_dim;
        let d = dec.dec_dim;
        let taps = EncoderTaps {
            taps: vec![],
            final_tokens: g.constant(&[m, dim], vec![0.5; m * dim]),
        };
        let zero_pos = g.constant(&[8, d], vec![0.0; 8 * d]);
        let x = built
            .dec_model
            .build_input(&taps, &plan, &zero_pos, &leaves)
            .unwrap();
        let mask_vals = set.get(built.dec_model.mask_token).values.clone();
        let xv = x.values();
        for &r in &plan.masked_idx {
            assert_eq!(&xv[r * d..(r + 1) * d], &mask_vals[..]);
        }
        for &r in &plan.visible_idx {
            assert!(xv[r * d..(r + 1) * d].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cross_attention_shape_is_n_by_m() {
        let (enc, dec) = toy_setup();
        let built = build(&enc, &dec);
        let g = Graph::<f64>::new();
        let leaves = built.set.bind(&g);
        let n = 8;
        let m = 3;
        let x = g.constant(
            &[n, dec.dec_dim],
            (0..n * dec.dec_dim).map(|i| (i as f64) * 0.01).collect(),
        );
        let tap = g.constant(
            &[m, enc.embed_dim],
            (0..m * enc.embed_dim).map(|i| (i as f64) * 0.02).collect(),
        );
        let (_, probs) = built.dec_model.cross_stage(0, &x, &tap, &leaves).unwrap();
        assert_eq!(probs.shape(), &[dec.heads, n, m]);
        for row in probs.values().chunks(m) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_visible_key_gets_full_attention() {
        let (enc, dec) = toy_setup();
        let built = build(&enc, &dec);
        let g = Graph::<f64>::new();
        let leaves = built.set.bind(&g);
        let x = g.constant(
            &[4, dec.dec_dim],
            (0..4 * dec.dec_dim).map(|i| (i as f64) * 0.05).collect(),
        );
        let tap = g.constant(
            &[1, enc.embed_dim],
            (0..enc.embed_dim).map(|i| (i as f64) * 0.1).collect(),
        );
        let (_, probs) = built.dec_model.cross_stage(0, &x, &tap, &leaves).unwrap();
        assert!(probs.values().iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn masked_mse_zero_when_equal_and_isolated_from_visible() {
        let g = Graph::<f64>::new();
        let plan = MaskPlan {
            gamma: 0.5,
            visible_idx: vec![0, 1],
            masked_idx: vec![2, 3],
        };
        let target = g.constant(&[4, 2], vec![0.2; 8]);
        let pred = g.constant(&[4, 2], vec![0.2; 8]);
        assert_eq!(masked_mse(&pred, &target, &plan).unwrap().item(), 0.0);
        let pred2 = g.constant(&[4, 2], vec![9.0, 9.0, 9.0, 9.0, 0.2, 0.2, 0.2, 0.2]);
        assert_eq!(masked_mse(&pred2, &target, &plan).unwrap().item(), 0.0);
    }

    // Oracle: brute-force per-voxel accumulation, independent of the op.
    #[test]
    fn masked_mse_matches_brute_force_sum() {
        let g = Graph::<f64>::new();
        let n = 7;
        let k = 5;
        let pred_data: Vec<f64> = (0..n * k)
            .map(|i| ((i * 31 % 17) as f64) * 0.1 - 0.6)
            .collect();
        let target_data: Vec<f64> = (0..n * k).map(|i| ((i * 13 % 19) as f64) * 0.05).collect();
        let plan = sample_mask(n, 0.6, &mut SeededRng::new(4)).unwrap();

        let mut acc = 0.0;
        for &r in &plan.masked_idx {
            for j in 0..k {
                let d = pred_data[r * k + j] - target_data[r * k + j];
                acc += d * d;
            }
        }
        let brute = acc / (plan.masked_idx.len() * k) as f64;

        let pred = g.constant(&[n, k], pred_data);
        let target = g.constant(&[n, k], target_data);
        let loss = masked_mse(&pred, &target, &plan).unwrap().item();
        let rel = (loss - brute).abs() / brute.abs().max(1e-12);
        assert!(rel < 1e-6, "op {loss} vs brute force {brute}");
    }

    #[test]
    fn every_tap_receives_gradient() {
        let (enc, dec) = toy_setup();
        let built = build(&enc, &dec);
        let plan = sample_mask(8, 0.5, &mut SeededRng::new(9)).unwrap();
        let g = Graph::<f64>::new();
        let leaves = built.set.bind(&g);
        let m = plan.visible_count();
        let pv = enc.patch_volume();
        let dim = enc.embed_dim;
        let patches = g.constant(
            &[m, pv],
            (0..m * pv).map(|i| ((i % 7) as f64) * 0.1).collect(),
        );
        let pos_enc = pos_embed_3d(&built.grid, dim).unwrap();
        let pos_rows = g.constant(&[m, dim], pos_enc.rows_for::<f64>(&plan.visible_idx).data);
        let embedded = built.enc_model.embed(&patches, &pos_rows, &leaves).unwrap();
        let taps = built.enc_model.encode(&embedded, &leaves, None).unwrap();
        let pos_dec = pos_embed_3d(&built.grid, dec.dec_dim).unwrap();
        let all: Vec<usize> = (0..8).collect();
        let dec_pos = g.constant(&[8, dec.dec_dim], pos_dec.rows_for::<f64>(&all).data);
        let pred = built
            .dec_model
            .forward(&taps, &plan, &dec_pos, &leaves)
            .unwrap();
        let target = g.constant(&[8, pv], vec![0.4; 8 * pv]);
        let loss = masked_mse(&pred, &target, &plan).unwrap();
        loss.backward().unwrap();
        for (layer, tap) in &taps.taps {
            let grad = tap.grad().expect("tap gradient missing");
            let norm: f64 = grad.iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "tap layer {layer} got zero gradient");
        }
    }
}
