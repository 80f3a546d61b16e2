//! Analysis instruments: singular spectra and effective rank of per-layer
//! attention values, attention-map extraction, the analytic MAC cost model
//! for encoder/decoder blocks, and a single-thread wall-clock benchmark of
//! the two decoder variants.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{Graph, GraphError};
use crate::decoder::{DecoderConfig, DecoderModel};
use crate::encoder::{EncoderConfig, EncoderTaps};
use crate::matrix::Matrix;
use crate::model::{ForwardOpts, MaeModel, ModelError};
use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::tokenizer::{patchify, sample_mask, MaskPlan, PatchGrid, PosEmbed3D, TokenError};
use crate::volume::Volume;

/// Counting convention declared in every cost/benchmark report.
pub const MAC_CONVENTION: &str = "1 MAC = 1 multiply-add; linear(n: d->e) = n*d*e MACs; \
     attention counted per transformer block (projections, logits, attention-value product, FFN); \
     norms, softmax, activations, patch embedding and reconstruction head uncounted";

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("non-finite entries in input matrix")]
    NonFinite,
    #[error("zero matrix has no effective rank")]
    ZeroMatrix,
    #[error("{what} index {index} out of range ({len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Singular values and effective rank
// ---------------------------------------------------------------------------

/// Singular values of `A`, descending. Computed as square roots of the
/// eigenvalues of the smaller Gram matrix (AᵀA or AAᵀ) via cyclic Jacobi
/// iteration to relative tolerance 1e-10. The Gram route squares the
/// conditioning, so the zero cut acts on eigenvalues: anything below
/// `1e-12 * lambda_max` is numerically indistinguishable from zero and is
/// reported as an exact zero.
pub fn singular_values(a: &Matrix<f64>) -> Result<Vec<f64>, DiagError> {
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(DiagError::NonFinite);
    }
    if a.rows == 0 || a.cols == 0 {
        return Err(DiagError::BadInput("empty matrix".into()));
    }
    let gram = if a.rows >= a.cols {
        gram_ata(a)
    } else {
        gram_ata(&a.transposed())
    };
    let mut eig = jacobi_eigenvalues(gram);
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let lambda_max = eig[0].max(0.0);
    let floor = 1e-12 * lambda_max;
    let sigma: Vec<f64> = eig
        .into_iter()
        .map(|l| if l <= floor { 0.0 } else { l.sqrt() })
        .collect();
    Ok(sigma)
}

/// k x k Gram matrix AᵀA for A with k columns.
#[allow(clippy::needless_range_loop)]
fn gram_ata(a: &Matrix<f64>) -> Matrix<f64> {
    let k = a.cols;
    let mut g = Matrix::zeros(k, k);
    for r in 0..a.rows {
        let row = a.row(r);
        for i in 0..k {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..k {
                g.data[i * k + j] += ri * row[j];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            g.data[i * k + j] = g.data[j * k + i];
        }
    }
    g
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut g: Matrix<f64>) -> Vec<f64> {
    let k = g.rows;
    if k == 1 {
        return vec![g.data[0]];
    }
    let frob: f64 = g.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if frob == 0.0 {
        return vec![0.0; k];
    }
    let tol = 1e-10 * frob;
    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..k {
            for q in p + 1..k {
                off += g.data[p * k + q].powi(2);
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = g.data[p * k + q];
                if apq == 0.0 {
                    continue;
                }
                let app = g.data[p * k + p];
                let aqq = g.data[q * k + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                g.data[p * k + p] = app - t * apq;
                g.data[q * k + q] = aqq + t * apq;
                g.data[p * k + q] = 0.0;
                g.data[q * k + p] = 0.0;
                for i in 0..k {
                    if i == p || i == q {
                        continue;
                    }
                    let gip = g.data[i * k + p];
                    let giq = g.data[i * k + q];
                    let new_p = c * gip - s * giq;
                    let new_q = s * gip + c * giq;
                    g.data[i * k + p] = new_p;
                    g.data[p * k + i] = new_p;
                    g.data[i * k + q] = new_q;
                    g.data[q * k + i] = new_q;
                }
            }
        }
    }
    (0..k).map(|i| g.data[i * k + i]).collect()
}

/// Entropy of normalised singular values. Zero-mass terms contribute zero.
pub fn effective_rank(a: &Matrix<f64>) -> Result<f64, DiagError> {
    effective_rank_from_sigmas(&singular_values(a)?)
}

pub fn effective_rank_from_sigmas(sigmas: &[f64]) -> Result<f64, DiagError> {
    let total: f64 = sigmas.iter().sum();
    if total <= 0.0 {
        return Err(DiagError::ZeroMatrix);
    }
    let mut rho = 0.0;
    for &s in sigmas {
        let nb = s / total;
        if nb > 0.0 {
            rho -= nb * nb.ln();
        }
    }
    Ok(rho)
}

// ---------------------------------------------------------------------------
// Spectrum sweep over encoder layers
// ---------------------------------------------------------------------------

/// Singular spectrum of one layer's attention values.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    pub volume: usize,
    /// 1-based encoder layer.
    pub layer: usize,
    /// Descending singular values.
    pub singular: Vec<f64>,
    /// sigma_i / sum(sigma); sums to one.
    pub normalized: Vec<f64>,
    pub effective_rank: f64,
}

/// Forward each probe volume with all tokens visible and report the
/// spectrum of every layer's value matrix (tokens x embed_dim).
pub fn spectrum_sweep(
    model: &MaeModel<f32>,
    volumes: &[Volume],
) -> Result<Vec<SpectrumReport>, DiagError> {
    let mut reports = Vec::new();
    for (vi, vol) in volumes.iter().enumerate() {
        let (_, tokens) = patchify(vol, model.enc_cfg.patch_size)?;
        if tokens.rows != model.token_count() {
            return Err(DiagError::BadInput(format!(
                "probe volume {} has {} tokens, model expects {}",
                vi,
                tokens.rows,
                model.token_count()
            )));
        }
        let plan = MaskPlan::all_visible(model.token_count());
        let graph = Graph::<f32>::new();
        let leaves = model.bind(&graph);
        let fwd = model.forward_sample(
            &graph,
            &leaves,
            &tokens.cast::<f32>(),
            &plan,
            ForwardOpts {
                skip_loss: true,
                trace: true,
            },
        )?;
        for layer in fwd.trace.expect("trace requested") {
            let vshape = layer.values.shape().to_vec();
            let vals: Vec<f64> = layer.values.values().iter().map(|&v| v as f64).collect();
            let matrix = Matrix::from_vec(vshape[0], vshape[1], vals);
            let singular = singular_values(&matrix)?;
            let effective_rank = effective_rank_from_sigmas(&singular)?;
            let total: f64 = singular.iter().sum();
            let normalized = singular.iter().map(|s| s / total).collect();
            reports.push(SpectrumReport {
                volume: vi,
                layer: layer.layer,
                singular,
                normalized,
                effective_rank,
            });
        }
    }
    Ok(reports)
}

/// One row per (volume, layer); sigma columns are padded per the widest row.
pub fn spectrum_csv(reports: &[SpectrumReport]) -> String {
    let width = reports.iter().map(|r| r.singular.len()).max().unwrap_or(0);
    let mut out = String::new();
    out.push_str("volume,layer,effective_rank");
    for i in 0..width {
        out.push_str(&format!(",sigma_{i}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{},{},{}", r.volume, r.layer, r.effective_rank));
        for i in 0..width {
            match r.singular.get(i) {
                Some(s) => out.push_str(&format!(",{s}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Attention maps
// ---------------------------------------------------------------------------

/// Which heads contribute to an extracted map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelect {
    Head(usize),
    Mean,
}

#[derive(Debug, Clone)]
pub struct AttnMap {
    /// 1-based encoder layer the map came from.
    pub layer: usize,
    pub head: HeadSelect,
    pub query: usize,
    pub grid: PatchGrid,
    /// One attention weight per token; sums to one.
    pub weights: Vec<f64>,
}

/// Softmax row of the chosen layer/head for a query token, over all tokens
/// of the probe volume (extraction always runs unmasked).
pub fn attention_map(
    model: &MaeModel<f32>,
    volume: &Volume,
    query: usize,
    layer: usize,
    head: HeadSelect,
) -> Result<AttnMap, DiagError> {
    let n = model.token_count();
    if query >= n {
        return Err(DiagError::IndexOutOfRange {
            what: "query token",
            index: query,
            len: n,
        });
    }
    if layer == 0 || layer > model.enc_cfg.depth {
        return Err(DiagError::IndexOutOfRange {
            what: "layer",
            index: layer,
            len: model.enc_cfg.depth,
        });
    }
    let heads = model.enc_cfg.heads;
    if let HeadSelect::Head(h) = head {
        if h >= heads {
            return Err(DiagError::IndexOutOfRange {
                what: "head",
                index: h,
                len: heads,
            });
        }
    }
    let (_, tokens) = patchify(volume, model.enc_cfg.patch_size)?;
    if tokens.rows != n {
        return Err(DiagError::BadInput(format!(
            "volume has {} tokens, model expects {n}",
            tokens.rows
        )));
    }
    let plan = MaskPlan::all_visible(n);
    let graph = Graph::<f32>::new();
    let leaves = model.bind(&graph);
    let fwd = model.forward_sample(
        &graph,
        &leaves,
        &tokens.cast::<f32>(),
        &plan,
        ForwardOpts {
            skip_loss: true,
            trace: true,
        },
    )?;
    let trace = fwd.trace.expect("trace requested");
    let probs = trace[layer - 1].probs.values();
    let weights = match head {
        HeadSelect::Head(h) => probs[(h * n + query) * n..(h * n + query) * n + n]
            .iter()
            .map(|&v| v as f64)
            .collect(),
        HeadSelect::Mean => {
            let mut acc = vec![0.0f64; n];
            for h in 0..heads {
                let row = &probs[(h * n + query) * n..(h * n + query) * n + n];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            for a in &mut acc {
                *a /= heads as f64;
            }
            acc
        }
    };
    Ok(AttnMap {
        layer,
        head,
        query,
        grid: model.grid,
        weights,
    })
}

impl AttnMap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token,grid_d,grid_h,grid_w,weight\n");
        for (p, w) in self.weights.iter().enumerate() {
            let (d, h, wi) = self.grid.coords(p);
            out.push_str(&format!("{p},{d},{h},{wi},{w}\n"));
        }
        out
    }

    /// Write one 8-bit P5 image per depth slice, named
    /// `<prefix>_layer<l>_slice<k>.pgm`, scaled so the global maximum maps
    /// to 255. Returns the written paths.
    pub fn write_pgm_slices(&self, prefix: &str) -> Result<Vec<PathBuf>, DiagError> {
        let (gd, gh, gw) = self.grid.grid;
        let max = self.weights.iter().cloned().fold(0.0f64, f64::max);
        let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
        let mut paths = Vec::with_capacity(gd);
        for k in 0..gd {
            let path = PathBuf::from(format!("{prefix}_layer{}_slice{k}.pgm", self.layer));
            let mut bytes = Vec::with_capacity(gh * gw + 32);
            bytes.extend_from_slice(format!("P5\n{gw} {gh}\n255\n").as_bytes());
            for h in 0..gh {
                for w in 0..gw {
                    let v = self.weights[(k * gh + h) * gw + w];
                    bytes.push((v * scale).round().clamp(0.0, 255.0) as u8);
                }
            }
            let mut f = std::fs::File::create(&path)?;
            f.write_all(&bytes)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

// ---------------------------------------------------------------------------
// Analytic MAC model
// ---------------------------------------------------------------------------

/// Exact per-block multiply-accumulate counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMacs {
    pub projections: u128,
    pub attn_logits: u128,
    pub attn_values: u128,
    pub ffn: u128,
}

impl BlockMacs {
    pub fn total(&self) -> u128 {
        self.projections + self.attn_logits + self.attn_values + self.ffn
    }
}

/// Self-attention block over `s` tokens of width `d`:
/// `4sd^2 + 2s^2 d + 2r*sd^2`.
fn self_block_macs(s: u128, d: u128, hidden: u128) -> BlockMacs {
    BlockMacs {
        projections: 4 * s * d * d,
        attn_logits: s * s * d,
        attn_values: s * s * d,
        ffn: 2 * s * d * hidden,
    }
}

/// Cross-attention block with `n` queries and `m` keys at width `d`:
/// `2nd^2 + 2md^2 + 2nmd + 2r*nd^2`. K/V projection cost is modelled at
/// the decoder width.
fn cross_block_macs(n: u128, m: u128, d: u128, hidden: u128) -> BlockMacs {
    BlockMacs {
        projections: 2 * n * d * d + 2 * m * d * d,
        attn_logits: n * m * d,
        attn_values: n * m * d,
        ffn: 2 * n * d * hidden,
    }
}

#[derive(Debug, Clone)]
pub struct MacReport {
    pub n: u64,
    pub m: u64,
    pub gamma: f64,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub dec_dim: usize,
    pub n_self: usize,
    pub n_cross: usize,
    pub encoder_block: BlockMacs,
    pub encoder_total: u128,
    pub self_block: BlockMacs,
    pub cross_block: BlockMacs,
    /// Hierarchical decoder: n_self self blocks + n_cross cross blocks.
    pub decode_total: u128,
    /// Baseline decoder: (n_self + n_cross) self blocks.
    pub baseline_total: u128,
    /// QK^T similarity MACs per self block (N^2 d).
    pub similarity_self: u128,
    /// QK^T similarity MACs per cross block (N M d).
    pub similarity_cross: u128,
}

impl MacReport {
    /// similarity_cross / similarity_self == M / N == 1 - gamma when
    /// gamma*N is integral.
    pub fn similarity_ratio(&self) -> f64 {
        self.similarity_cross as f64 / self.similarity_self as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# convention: {MAC_CONVENTION}\n"));
        s.push_str(&format!(
            "n={} m={} gamma={} enc_dim={} enc_depth={} dec_dim={} n_self={} n_cross={}\n",
            self.n,
            self.m,
            self.gamma,
            self.enc_dim,
            self.enc_depth,
            self.dec_dim,
            self.n_self,
            self.n_cross
        ));
        let row = |name: &str, b: &BlockMacs| {
            format!(
                "{name}: projections={} logits={} values={} ffn={} total={}\n",
                b.projections,
                b.attn_logits,
                b.attn_values,
                b.ffn,
                b.total()
            )
        };
        s.push_str(&row("encoder_block(M tokens)", &self.encoder_block));
        s.push_str(&row("decoder_self_block(N tokens)", &self.self_block));
        s.push_str(&row(
            "decoder_cross_block(N queries, M keys)",
            &self.cross_block,
        ));
        s.push_str(&format!("encoder_total={}\n", self.encoder_total));
        s.push_str(&format!("decode_total={}\n", self.decode_total));
        s.push_str(&format!("baseline_total={}\n", self.baseline_total));
        s.push_str(&format!(
            "similarity_self={} similarity_cross={} similarity_ratio={}\n",
            self.similarity_self,
            self.similarity_cross,
            self.similarity_ratio()
        ));
        s
    }
}

/// Visible-token count for a mask ratio: `N - floor(gamma * N)`.
pub fn visible_count(n: u64, gamma: f64) -> u64 {
    n - (gamma * n as f64).floor() as u64
}

/// Closed-form MAC counts for the encoder and both decoder variants.
/// Encoder blocks run on M visible tokens; the hierarchical decoder's cross
/// blocks attend N queries against M keys.
pub fn count_macs(enc: &EncoderConfig, dec: &DecoderConfig, n: u64, gamma: f64) -> MacReport {
    let m = visible_count(n, gamma);
    let e = enc.embed_dim as u128;
    let d = dec.dec_dim as u128;
    let enc_hidden = crate::attention::ffn_hidden_dim(enc.embed_dim, enc.ffn_ratio) as u128;
    let dec_hidden = crate::attention::ffn_hidden_dim(dec.dec_dim, dec.ffn_ratio) as u128;

    let encoder_block = self_block_macs(m as u128, e, enc_hidden);
    let self_block = self_block_macs(n as u128, d, dec_hidden);
    let cross_block = cross_block_macs(n as u128, m as u128, d, dec_hidden);

    MacReport {
        n,
        m,
        gamma,
        enc_dim: enc.embed_dim,
        enc_depth: enc.depth,
        dec_dim: dec.dec_dim,
        n_self: dec.n_self,
        n_cross: dec.n_cross,
        encoder_block,
        encoder_total: enc.depth as u128 * encoder_block.total(),
        self_block,
        cross_block,
        decode_total: dec.n_self as u128 * self_block.total()
            + dec.n_cross as u128 * cross_block.total(),
        baseline_total: (dec.n_self + dec.n_cross) as u128 * self_block.total(),
        similarity_self: (n as u128) * (n as u128) * d,
        similarity_cross: (n as u128) * (m as u128) * d,
    }
}

// ---------------------------------------------------------------------------
// Wall-clock decoder benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub variant: &'static str,
    pub gamma: f64,
    pub n: usize,
    pub m: usize,
    pub reps: usize,
    pub median_ms: f64,
}

/// Median forward wall-clock of the hierarchical decoder and the
/// equal-depth baseline over synthetic encoder taps. Runs strictly on the
/// calling thread.
pub fn bench_decoder(
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    grid: PatchGrid,
    gammas: &[f64],
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, DiagError> {
    if reps == 0 {
        return Err(DiagError::BadInput("reps must be positive".into()));
    }
    let n = grid.token_count();
    let mut rng = SeededRng::new(seed);

    let mut hier_params = ParamSet::<f32>::new();
    let hier = DecoderModel::init(
        dec,
        enc.embed_dim,
        enc.patch_volume(),
        &mut hier_params,
        &mut rng,
    );
    let base_cfg = dec.baseline_equivalent();
    let mut base_params = ParamSet::<f32>::new();
    let base = DecoderModel::init(
        &base_cfg,
        enc.embed_dim,
        enc.patch_volume(),
        &mut base_params,
        &mut rng,
    );

    let pos_dec = crate::tokenizer::pos_embed_3d(&grid, dec.dec_dim)?;
    let all: Vec<usize> = (0..n).collect();
    let dec_pos_data = pos_dec.rows_for::<f32>(&all).data;

    let mut rows = Vec::new();
    for &gamma in gammas {
        let plan = sample_mask(n, gamma, &mut rng)?;
        let m = plan.visible_count();
        let tap_data: Vec<Vec<f32>> = enc
            .tap_layers
            .iter()
            .map(|_| {
                (0..m * enc.embed_dim)
                    .map(|_| rng.uniform(-1.0, 1.0) as f32)
                    .collect()
            })
            .collect();
        let final_data: Vec<f32> = (0..m * enc.embed_dim)
            .map(|_| rng.uniform(-1.0, 1.0) as f32)
            .collect();

        let run_variant = |model: &DecoderModel,
                           params: &ParamSet<f32>,
                           variant: &'static str|
         -> Result<BenchRow, DiagError> {
            let one_forward = || -> Result<(), DiagError> {
                let graph = Graph::<f32>::new();
                let leaves = params.bind(&graph);
                let taps = EncoderTaps {
                    taps: enc
                        .tap_layers
                        .iter()
                        .zip(&tap_data)
                        .map(|(&l, d)| (l, graph.constant(&[m, enc.embed_dim], d.clone())))
                        .collect(),
                    final_tokens: graph.constant(&[m, enc.embed_dim], final_data.clone()),
                };
                let dec_pos = graph.constant(&[n, dec.dec_dim], dec_pos_data.clone());
                let pred = model.forward(&taps, &plan, &dec_pos, &leaves)?;
                std::hint::black_box(pred.values());
                Ok(())
            };
            for _ in 0..2 {
                one_forward()?;
            }
            let mut times_ms = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t0 = Instant::now();
                one_forward()?;
                times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median_ms = if reps % 2 == 1 {
                times_ms[reps / 2]
            } else {
                0.5 * (times_ms[reps / 2 - 1] + times_ms[reps / 2])
            };
            Ok(BenchRow {
                variant,
                gamma,
                n,
                m,
                reps,
                median_ms,
            })
        };

        rows.push(run_variant(&hier, &hier_params, "encoder_driven")?);
        rows.push(run_variant(&base, &base_params, "decoder_driven_baseline")?);
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("# threads=1 convention: {MAC_CONVENTION}\n"));
    out.push_str("variant,gamma,n,m,reps,median_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.gamma, r.n, r.m, r.reps, r.median_ms
        ));
    }
    out
}

/// Decoder positional table helper shared by CLI surfaces.
pub fn decoder_pos_table(grid: &PatchGrid, dec_dim: usize) -> Result<PosEmbed3D, DiagError> {
    Ok(crate::tokenizer::pos_embed_3d(grid, dec_dim)?)
}

/// Write a string report next to other artifacts.
pub fn write_report(path: impl AsRef<Path>, contents: &str) -> Result<(), DiagError> {
    std::fs::write(path, contents)?;
    Ok(())
}
