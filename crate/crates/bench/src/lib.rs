//! Shared fixtures for the decoder benchmarks.

use hiendmae_core::autodiff::{Graph, Tensor};
use hiendmae_core::decoder::{DecoderConfig, DecoderModel};
use hiendmae_core::encoder::{EncoderConfig, EncoderTaps};
use hiendmae_core::params::ParamSet;
use hiendmae_core::rng::SeededRng;
use hiendmae_core::tokenizer::{pos_embed_3d, sample_mask, MaskPlan, PatchGrid};

pub struct DecoderFixture {
    pub enc: EncoderConfig,
    pub dec: DecoderConfig,
    pub grid: PatchGrid,
    pub params: ParamSet<f32>,
    pub model: DecoderModel,
    pub plan: MaskPlan,
    tap_data: Vec<Vec<f32>>,
    final_data: Vec<f32>,
    dec_pos: Vec<f32>,
}

impl DecoderFixture {
    /// Hierarchical decoder (`baseline = false`) or the equal-depth
    /// self-attention baseline, over synthetic taps at mask ratio `gamma`.
    pub fn new(gamma: f64, baseline: bool, seed: u64) -> Self {
        let enc = EncoderConfig {
            patch_size: 2,
            embed_dim: 48,
            depth: 3,
            heads: 4,
            ffn_ratio: 4.0,
            tap_layers: vec![1, 2, 3],
        };
        let dec_hier = DecoderConfig {
            dec_dim: 48,
            heads: 4,
            n_self: 2,
            n_cross: 3,
            ffn_ratio: 4.0,
            stage_to_tap: vec![3, 2, 1],
        };
        let dec = if baseline {
            dec_hier.baseline_equivalent()
        } else {
            dec_hier
        };
        let grid = PatchGrid {
            patch: 2,
            grid: (8, 8, 8),
        };
        let n = grid.token_count();

        let mut rng = SeededRng::new(seed);
        let mut params = ParamSet::<f32>::new();
        let model = DecoderModel::init(
            &dec,
            enc.embed_dim,
            enc.patch_volume(),
            &mut params,
            &mut rng,
        );
        let plan = sample_mask(n, gamma, &mut rng).unwrap();
        let m = plan.visible_count();
        let tap_data = enc
            .tap_layers
            .iter()
            .map(|_| {
                (0..m * enc.embed_dim)
                    .map(|_| rng.uniform(-1.0, 1.0) as f32)
                    .collect()
            })
            .collect();
        let final_data = (0..m * enc.embed_dim)
            .map(|_| rng.uniform(-1.0, 1.0) as f32)
            .collect();
        let pos = pos_embed_3d(&grid, dec.dec_dim).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let dec_pos = pos.rows_for::<f32>(&all).data;
        DecoderFixture {
            enc,
            dec,
            grid,
            params,
            model,
            plan,
            tap_data,
            final_data,
            dec_pos,
        }
    }

    /// One full decoder forward; returns the prediction values so the
    /// caller can black-box them.
    pub fn forward(&self) -> Vec<f32> {
        let n = self.grid.token_count();
        let m = self.plan.visible_count();
        let graph = Graph::<f32>::new();
        let leaves = self.params.bind(&graph);
        let taps = EncoderTaps {
            taps: self
                .enc
                .tap_layers
                .iter()
                .zip(&self.tap_data)
                .map(|(&l, d)| (l, graph.constant(&[m, self.enc.embed_dim], d.clone())))
                .collect(),
            final_tokens: graph.constant(&[m, self.enc.embed_dim], self.final_data.clone()),
        };
        let pos: Tensor<f32> = graph.constant(&[n, self.dec.dec_dim], self.dec_pos.clone());
        self.model
            .forward(&taps, &self.plan, &pos, &leaves)
            .expect("decoder forward")
            .values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_runs_both_variants() {
        for baseline in [false, true] {
            let fx = DecoderFixture::new(0.75, baseline, 3);
            let out = fx.forward();
            assert_eq!(out.len(), fx.grid.token_count() * fx.enc.patch_volume());
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }
}
