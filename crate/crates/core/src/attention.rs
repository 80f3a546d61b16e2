//! Multi-head attention and pre-norm transformer blocks shared by the
//! encoder and the decoder.
//!
//! Attention follows the scaled dot-product form: softmax(QK^T / sqrt(d_k))V
//! with d_k the per-head dimension, computed per head via a batched matmul
//! over a (heads, rows, d_k) layout, then re-merged and output-projected.

use crate::autodiff::{real, GraphError, Real, Tensor};
use crate::params::{ParamId, ParamSet};
use crate::rng::SeededRng;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Q/K/V/O projection parameters of one attention block. Q projects from
/// `q_in_dim`, K and V from `kv_in_dim`, all onto `dim`; O maps `dim -> dim`.
/// The key projection carries no bias: a shared key offset shifts every
/// logit in a softmax row equally, so it cannot affect the output.
#[derive(Debug, Clone)]
pub struct AttnProjections {
    pub dim: usize,
    pub heads: usize,
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
}

impl AttnProjections {
    pub fn init<T: Real>(
        set: &mut ParamSet<T>,
        prefix: &str,
        q_in_dim: usize,
        kv_in_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Self {
        assert!(
            dim.is_multiple_of(heads),
            "dim {dim} not divisible by heads {heads}"
        );
        let mut w = |name: &str, shape: Vec<usize>| {
            set.register_trunc_normal(format!("{prefix}.{name}"), shape, INIT_STD, rng)
        };
        let q_w = w("q.weight", vec![dim, q_in_dim]);
        let k_w = w("k.weight", vec![dim, kv_in_dim]);
        let v_w = w("v.weight", vec![dim, kv_in_dim]);
        let o_w = w("o.weight", vec![dim, dim]);
        let q_b = set.register_zeros(format!("{prefix}.q.bias"), vec![dim]);
        let v_b = set.register_zeros(format!("{prefix}.v.bias"), vec![dim]);
        let o_b = set.register_zeros(format!("{prefix}.o.bias"), vec![dim]);
        AttnProjections {
            dim,
            heads,
            q_w,
            q_b,
            k_w,
            v_w,
            v_b,
            o_w,
            o_b,
        }
    }
}

/// Attention output plus the tensors diagnostics care about.
pub struct AttnOutput<T> {
    /// Output-projected context, `rows(q) x dim`.
    pub out: Tensor<T>,
    /// Attention probabilities, `(heads, rows(q), rows(kv))`.
    pub probs: Tensor<T>,
    /// Full value projection of the key/value input, `rows(kv) x dim`
    /// (the concatenated per-head values, before attention weighting).
    pub values: Tensor<T>,
}

/// Scaled dot-product multi-head attention; `q_in` and `kv_in` may differ
/// in both row count and width (cross-attention).
pub fn multi_head_attention<T: Real>(
    q_in: &Tensor<T>,
    kv_in: &Tensor<T>,
    p: &AttnProjections,
    leaves: &[Tensor<T>],
) -> Result<AttnOutput<T>, GraphError> {
    let heads = p.heads;
    let dk = p.dim / heads;
    let n_q = q_in.shape()[0];
    let n_kv = kv_in.shape()[0];

    let q = q_in.linear(&leaves[p.q_w], Some(&leaves[p.q_b]))?;
    let k = kv_in.linear(&leaves[p.k_w], None)?;
    let v = kv_in.linear(&leaves[p.v_w], Some(&leaves[p.v_b]))?;

    // (rows, dim) -> (heads, rows, dk)
    let qh = q.reshape(&[n_q, heads, dk])?.permute_102()?;
    let kh = k.reshape(&[n_kv, heads, dk])?.permute_102()?;
    let vh = v.reshape(&[n_kv, heads, dk])?.permute_102()?;

    let scale = real::<T>(1.0 / (dk as f64).sqrt());
    let logits = qh.matmul(&kh.transpose_last()?)?.scale(scale);
    let probs = logits.softmax()?;
    let ctx = probs.matmul(&vh)?.permute_102()?.reshape(&[n_q, p.dim])?;
    let out = ctx.linear(&leaves[p.o_w], Some(&leaves[p.o_b]))?;
    Ok(AttnOutput {
        out,
        probs,
        values: v,
    })
}

/// Parameters of one pre-norm transformer block: LN -> attention -> residual,
/// LN -> feed-forward -> residual.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn: AttnProjections,
    norm1_g: ParamId,
    norm1_b: ParamId,
    norm2_g: ParamId,
    norm2_b: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

impl BlockParams {
    pub fn init<T: Real>(
        set: &mut ParamSet<T>,
        prefix: &str,
        dim: usize,
        kv_in_dim: usize,
        heads: usize,
        ffn_ratio: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let hidden = ffn_hidden_dim(dim, ffn_ratio);
        let attn = AttnProjections::init(
            set,
            &format!("{prefix}.attn"),
            dim,
            kv_in_dim,
            dim,
            heads,
            rng,
        );
        let norm1_g = set.register_ones(format!("{prefix}.norm1.gain"), vec![dim]);
        let norm1_b = set.register_zeros(format!("{prefix}.norm1.bias"), vec![dim]);
        let norm2_g = set.register_ones(format!("{prefix}.norm2.gain"), vec![dim]);
        let norm2_b = set.register_zeros(format!("{prefix}.norm2.bias"), vec![dim]);
        let ffn_w1 = set.register_trunc_normal(
            format!("{prefix}.ffn.w1.weight"),
            vec![hidden, dim],
            INIT_STD,
            rng,
        );
        let ffn_b1 = set.register_zeros(format!("{prefix}.ffn.w1.bias"), vec![hidden]);
        let ffn_w2 = set.register_trunc_normal(
            format!("{prefix}.ffn.w2.weight"),
            vec![dim, hidden],
            INIT_STD,
            rng,
        );
        let ffn_b2 = set.register_zeros(format!("{prefix}.ffn.w2.bias"), vec![dim]);
        BlockParams {
            attn,
            norm1_g,
            norm1_b,
            norm2_g,
            norm2_b,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
        }
    }

    fn ffn<T: Real>(&self, x: &Tensor<T>, leaves: &[Tensor<T>]) -> Result<Tensor<T>, GraphError> {
        x.linear(&leaves[self.ffn_w1], Some(&leaves[self.ffn_b1]))?
            .gelu()
            .linear(&leaves[self.ffn_w2], Some(&leaves[self.ffn_b2]))
    }

    /// Pre-norm self-attention block: `x + MHSA(LN(x))`, then `+ FFN(LN(.))`.
    pub fn forward_self<T: Real>(
        &self,
        x: &Tensor<T>,
        leaves: &[Tensor<T>],
    ) -> Result<(Tensor<T>, AttnOutput<T>), GraphError> {
        let eps = real::<T>(LAYER_NORM_EPS);
        let xn = x.layer_norm(&leaves[self.norm1_g], &leaves[self.norm1_b], eps)?;
        let attn = multi_head_attention(&xn, &xn, &self.attn, leaves)?;
        let x = x.add(&attn.out)?;
        let xn2 = x.layer_norm(&leaves[self.norm2_g], &leaves[self.norm2_b], eps)?;
        let out = x.add(&self.ffn(&xn2, leaves)?)?;
        Ok((out, attn))
    }

    /// Pre-norm cross-attention block: queries from `LN(x)`, keys and values
    /// straight from `kv` (an encoder tap), then the FFN residual.
    pub fn forward_cross<T: Real>(
        &self,
        x: &Tensor<T>,
        kv: &Tensor<T>,
        leaves: &[Tensor<T>],
    ) -> Result<(Tensor<T>, AttnOutput<T>), GraphError> {
        let eps = real::<T>(LAYER_NORM_EPS);
        let xn = x.layer_norm(&leaves[self.norm1_g], &leaves[self.norm1_b], eps)?;
        let attn = multi_head_attention(&xn, kv, &self.attn, leaves)?;
        let x = x.add(&attn.out)?;
        let xn2 = x.layer_norm(&leaves[self.norm2_g], &leaves[self.norm2_b], eps)?;
        let out = x.add(&self.ffn(&xn2, leaves)?)?;
        Ok((out, attn))
    }
}

pub fn ffn_hidden_dim(dim: usize, ffn_ratio: f64) -> usize {
    ((dim as f64) * ffn_ratio).round() as usize
}
