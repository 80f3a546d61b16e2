//! Command-line entry point: synthetic data generation, pre-training,
//! spectrum diagnostics, attention maps, MAC accounting and the decoder
//! wall-clock benchmark.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 I/O failure,
//! 4 numeric failure (non-finite loss or gradient).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hiendmae_core::decoder::DecoderConfig;
use hiendmae_core::diagnostics::{
    attention_map, bench_csv, bench_decoder, count_macs, spectrum_csv, spectrum_sweep, DiagError,
    HeadSelect,
};
use hiendmae_core::encoder::EncoderConfig;
use hiendmae_core::tokenizer::PatchGrid;
use hiendmae_core::trainer::{
    metrics_csv_header, metrics_csv_row, synth_training_volume, CheckpointError, TrainConfig,
    TrainError, Trainer,
};
use hiendmae_core::volume::{
    crop_subvolume, load_rvol, preprocess, save_rvol, Volume, VolumeError, DEFAULT_CLIP,
};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
    fn io(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_IO,
            message: message.into(),
        }
    }
    fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGrad(_) => {
                CliError::numeric(e.to_string())
            }
            TrainError::Volume(VolumeError::IoFailure(_)) => CliError::io(e.to_string()),
            TrainError::Checkpoint(c) => match c {
                CheckpointError::Io(_)
                | CheckpointError::BadMagic(_)
                | CheckpointError::VersionMismatch { .. }
                | CheckpointError::BadHeader(_)
                | CheckpointError::ShapeMismatchOnLoad { .. } => CliError::io(e.to_string()),
            },
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::IoFailure(_) => CliError::io(e.to_string()),
            other => CliError::usage(other.to_string()),
        }
    }
}

impl From<DiagError> for CliError {
    fn from(e: DiagError) -> Self {
        match &e {
            DiagError::Io(_) => CliError::io(e.to_string()),
            DiagError::NonFinite | DiagError::ZeroMatrix => CliError::numeric(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

/// Top-level run configuration: the training config plus run outputs.
/// Unknown keys anywhere in the file are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    train: TrainConfig,
    out_dir: PathBuf,
    /// Save `ckpt_step<k>.hemc` at this step cadence (the final checkpoint
    /// is always written).
    #[serde(default)]
    checkpoint_every: Option<u64>,
}

fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// HIENDMAE_THREADS caps worker threads. All numeric kernels here are
/// single-threaded, so the effective cap is min(value, 1); the variable is
/// still validated so typos fail loudly.
fn worker_thread_cap() -> Result<usize, CliError> {
    match std::env::var("HIENDMAE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(1)),
            _ => Err(CliError::usage(format!(
                "HIENDMAE_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected D,H,W, got {s:?}"));
    }
    let mut out = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .trim()
            .parse::<usize>()
            .map_err(|_| format!("dimension {p:?} is not a positive integer"))?;
        if out[i] == 0 {
            return Err(format!("dimension {p:?} must be >= 1"));
        }
    }
    Ok((out[0], out[1], out[2]))
}

fn parse_head(s: &str) -> Result<HeadArg, String> {
    if s.eq_ignore_ascii_case("mean") {
        return Ok(HeadArg::Mean);
    }
    s.parse::<usize>()
        .map(HeadArg::Index)
        .map_err(|_| format!("expected a head index or \"mean\", got {s:?}"))
}

#[derive(Debug, Clone, Copy)]
enum HeadArg {
    Mean,
    Index(usize),
}

#[derive(Parser)]
#[command(
    name = "hiendmae",
    version,
    about = "Encoder-driven masked autoencoder pre-training and diagnostics for 3D volumes",
    after_help = "Exit codes: 0 ok, 2 usage/config error, 3 I/O failure, 4 numeric failure.\n\
                  HIENDMAE_THREADS (positive integer) caps worker threads."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate deterministic synthetic RVOL volumes plus a manifest.
    Synth(SynthArgs),
    /// Run pre-training from a JSON config, optionally resuming.
    Pretrain(PretrainArgs),
    /// Singular spectra and effective rank per encoder layer.
    Diagnose(DiagnoseArgs),
    /// Extract one query token's attention map as CSV + PGM slices.
    Attnmap(AttnmapArgs),
    /// Analytic MAC accounting for encoder and decoder variants.
    Flops(FlopsArgs),
    /// Wall-clock forward benchmark of the two decoder variants.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of volumes.
    #[arg(long)]
    count: usize,
    /// Volume dimensions as D,H,W (all >= 1).
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize, usize),
    /// Base seed; volume i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON run config (see configs/desk.json).
    #[arg(long)]
    config: PathBuf,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Checkpoint to analyse.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Directory of .rvol probe volumes; synthetic probes when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of synthetic probe volumes.
    #[arg(long, default_value_t = 2)]
    probes: usize,
    /// Seed for synthetic probes.
    #[arg(long, default_value_t = 7)]
    probe_seed: u64,
}

#[derive(Args)]
struct AttnmapArgs {
    /// Checkpoint to analyse.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output prefix: writes <prefix>.csv and <prefix>_layer<l>_slice<k>.pgm.
    #[arg(long)]
    out: String,
    /// RVOL probe volume; a synthetic probe is generated when omitted.
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Query token index in the patch grid.
    #[arg(long, default_value_t = 0)]
    query: usize,
    /// 1-based encoder layer.
    #[arg(long, default_value_t = 1)]
    layer: usize,
    /// Head index or "mean".
    #[arg(long, default_value = "mean", value_parser = parse_head)]
    head: HeadArg,
    /// Seed for the synthetic probe volume.
    #[arg(long, default_value_t = 7)]
    probe_seed: u64,
}

#[derive(Args)]
struct FlopsArgs {
    /// Mask ratio; repeat the flag for several ratios.
    #[arg(long = "gamma", required = true)]
    gammas: Vec<f64>,
    /// Total token count N.
    #[arg(long, default_value_t = 512)]
    n: u64,
    /// Read model dims from a run config instead of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1536)]
    enc_dim: usize,
    #[arg(long, default_value_t = 12)]
    enc_depth: usize,
    #[arg(long, default_value_t = 528)]
    dec_dim: usize,
    #[arg(long, default_value_t = 16)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    n_self: usize,
    #[arg(long, default_value_t = 3)]
    n_cross: usize,
    #[arg(long, default_value_t = 4.0)]
    ffn_ratio: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Mask ratio; repeat the flag for several ratios.
    #[arg(long = "gamma", default_values_t = [0.5, 0.75, 0.9])]
    gammas: Vec<f64>,
    /// Timed repetitions per variant (after 2 warm-ups).
    #[arg(long, default_value_t = 21)]
    reps: usize,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Patch grid as Gd,Gh,Gw.
    #[arg(long, value_parser = parse_dims, default_value = "16,8,8")]
    grid: (usize, usize, usize),
    #[arg(long, default_value_t = 2)]
    patch: usize,
    #[arg(long, default_value_t = 48)]
    enc_dim: usize,
    #[arg(long, default_value_t = 48)]
    dec_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    n_self: usize,
    #[arg(long, default_value_t = 3)]
    n_cross: usize,
    #[arg(long, default_value_t = 4.0)]
    ffn_ratio: f64,
    #[arg(long, default_value_t = 9)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    worker_thread_cap()?;
    match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Diagnose(args) => cmd_diagnose(args),
        Cmd::Attnmap(args) => cmd_attnmap(args),
        Cmd::Flops(args) => cmd_flops(args),
        Cmd::Bench(args) => cmd_bench(args),
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
    dims: (usize, usize, usize),
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::usage("--count must be >= 1"));
    }
    std::fs::create_dir_all(&args.out)?;
    let mut manifest = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let seed = args.seed + i as u64;
        let vol = synth_training_volume(args.dims, seed)?;
        let name = format!("vol_{i:04}.rvol");
        save_rvol(&vol, args.out.join(&name))?;
        manifest.push(ManifestEntry {
            file: name,
            seed,
            dims: args.dims,
        });
    }
    let manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::io(e.to_string()))?;
    std::fs::write(args.out.join("manifest.json"), manifest_json)?;
    println!(
        "wrote {} volumes of {:?} to {}",
        args.count,
        args.dims,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn cmd_pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let run_cfg = load_run_config(&args.config)?;
    std::fs::create_dir_all(&run_cfg.out_dir)?;

    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::resume_with_config(ckpt, run_cfg.train.clone())?,
        None => Trainer::new(run_cfg.train.clone())?,
    };

    if trainer.is_finished() {
        println!(
            "checkpoint already at step {} of {}; nothing to do",
            trainer.current_step(),
            run_cfg.train.total_steps
        );
        return Ok(());
    }

    let metrics_path = run_cfg.out_dir.join("metrics.csv");
    let mut metrics = if args.resume.is_some() && metrics_path.exists() {
        BufWriter::new(
            std::fs::OpenOptions::new()
                .append(true)
                .open(&metrics_path)?,
        )
    } else {
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        writeln!(w, "{}", metrics_csv_header())?;
        w.flush()?;
        w
    };

    let every = run_cfg.checkpoint_every.unwrap_or(0);
    let mut last_loss = f32::NAN;
    let mut boundary: Option<u64> = None;
    trainer.run(|m| {
        last_loss = m.loss;
        // Flushed per step so a crash leaves a usable trace.
        let _ = writeln!(metrics, "{}", metrics_csv_row(m));
        let _ = metrics.flush();
        if every > 0 && m.step % every == 0 {
            boundary = Some(m.step);
        }
    })?;
    if let Some(step) = boundary {
        trainer.save_checkpoint(run_cfg.out_dir.join(format!("ckpt_step{step}.hemc")))?;
    }
    trainer.save_checkpoint(run_cfg.out_dir.join("ckpt_final.hemc"))?;
    println!("final loss {last_loss}");
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnose / attnmap
// ---------------------------------------------------------------------------

/// Load or synthesise probe volumes, centre-crop to the model's crop and
/// apply the intensity window.
fn probe_volumes(
    trainer: &Trainer,
    data: &Option<PathBuf>,
    probes: usize,
    probe_seed: u64,
) -> Result<Vec<Volume>, CliError> {
    let crop = trainer.cfg.crop;
    let raw: Vec<Volume> = match data {
        Some(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "rvol"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CliError::usage(format!(
                    "no .rvol files in {}",
                    dir.display()
                )));
            }
            files.iter().map(load_rvol).collect::<Result<_, _>>()?
        }
        None => (0..probes)
            .map(|i| synth_training_volume(crop, probe_seed + i as u64))
            .collect::<Result<_, _>>()?,
    };
    raw.into_iter().map(|v| center_window(&v, crop)).collect()
}

fn center_window(v: &Volume, crop: (usize, usize, usize)) -> Result<Volume, CliError> {
    if v.dims.0 < crop.0 || v.dims.1 < crop.1 || v.dims.2 < crop.2 {
        return Err(CliError::usage(format!(
            "volume dims {:?} smaller than model crop {crop:?}",
            v.dims
        )));
    }
    let origin = (
        (v.dims.0 - crop.0) / 2,
        (v.dims.1 - crop.1) / 2,
        (v.dims.2 - crop.2) / 2,
    );
    let cropped = crop_subvolume(v, origin, crop)?;
    Ok(preprocess(&cropped, DEFAULT_CLIP.0, DEFAULT_CLIP.1)?)
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<(), CliError> {
    if args.data.is_none() && args.probes == 0 {
        return Err(CliError::usage("--probes must be >= 1"));
    }
    let trainer = Trainer::load_checkpoint(&args.ckpt)?;
    let probes = probe_volumes(&trainer, &args.data, args.probes, args.probe_seed)?;
    let reports = spectrum_sweep(&trainer.model, &probes)?;
    std::fs::write(&args.out, spectrum_csv(&reports))?;
    println!(
        "wrote {} spectrum rows ({} layers x {} volumes) to {}",
        reports.len(),
        trainer.cfg.encoder.depth,
        probes.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_attnmap(args: AttnmapArgs) -> Result<(), CliError> {
    let trainer = Trainer::load_checkpoint(&args.ckpt)?;
    let probe = match &args.volume {
        Some(path) => center_window(&load_rvol(path)?, trainer.cfg.crop)?,
        None => center_window(
            &synth_training_volume(trainer.cfg.crop, args.probe_seed)?,
            trainer.cfg.crop,
        )?,
    };
    let head = match args.head {
        HeadArg::Mean => HeadSelect::Mean,
        HeadArg::Index(h) => HeadSelect::Head(h),
    };
    let map = attention_map(&trainer.model, &probe, args.query, args.layer, head)?;
    std::fs::write(format!("{}.csv", args.out), map.to_csv())?;
    let paths = map.write_pgm_slices(&args.out)?;
    println!(
        "wrote {}.csv and {} PGM slices (layer {}, query {})",
        args.out,
        paths.len(),
        args.layer,
        args.query
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// flops / bench
// ---------------------------------------------------------------------------

fn flops_configs(args: &FlopsArgs) -> Result<(EncoderConfig, DecoderConfig), CliError> {
    if let Some(path) = &args.config {
        let run_cfg = load_run_config(path)?;
        return Ok((run_cfg.train.encoder, run_cfg.train.decoder));
    }
    // Evenly spaced taps (quarter-depth placement for depth 12, B = 3:
    // layers 3, 6, 9), queried deepest-first.
    let taps: Vec<usize> = match args.n_cross {
        0 => vec![args.enc_depth],
        k => {
            let step = (args.enc_depth / (k + 1)).max(1);
            (1..=k).map(|i| (i * step).min(args.enc_depth)).collect()
        }
    };
    let enc = EncoderConfig {
        patch_size: 12,
        embed_dim: args.enc_dim,
        depth: args.enc_depth,
        heads: args.heads,
        ffn_ratio: args.ffn_ratio,
        tap_layers: taps.clone(),
    };
    let dec = DecoderConfig {
        dec_dim: args.dec_dim,
        heads: args.heads,
        n_self: args.n_self,
        n_cross: args.n_cross,
        ffn_ratio: args.ffn_ratio,
        stage_to_tap: taps.into_iter().rev().collect(),
    };
    Ok((enc, dec))
}

fn cmd_flops(args: FlopsArgs) -> Result<(), CliError> {
    for &gamma in &args.gammas {
        if !(0.0..1.0).contains(&gamma) {
            return Err(CliError::usage(format!("--gamma {gamma} outside [0, 1)")));
        }
    }
    let (enc, dec) = flops_configs(&args)?;
    for &gamma in &args.gammas {
        let report = count_macs(&enc, &dec, args.n, gamma);
        print!("{}", report.to_text());
        println!();
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    for &gamma in &args.gammas {
        if !(0.0..1.0).contains(&gamma) {
            return Err(CliError::usage(format!("--gamma {gamma} outside [0, 1)")));
        }
    }
    if args.reps == 0 {
        return Err(CliError::usage("--reps must be >= 1"));
    }
    if args.n_cross == 0 {
        return Err(CliError::usage("--n-cross must be >= 1 for the comparison"));
    }
    let grid = PatchGrid {
        patch: args.patch,
        grid: args.grid,
    };
    let tap_layers: Vec<usize> = (1..=args.n_cross).collect();
    let enc = EncoderConfig {
        patch_size: args.patch,
        embed_dim: args.enc_dim,
        depth: args.n_cross,
        heads: args.heads,
        ffn_ratio: args.ffn_ratio,
        tap_layers: tap_layers.clone(),
    };
    let dec = DecoderConfig {
        dec_dim: args.dec_dim,
        heads: args.heads,
        n_self: args.n_self,
        n_cross: args.n_cross,
        ffn_ratio: args.ffn_ratio,
        stage_to_tap: tap_layers.into_iter().rev().collect(),
    };
    let rows = bench_decoder(&enc, &dec, grid, &args.gammas, args.reps, args.seed)?;
    let csv = bench_csv(&rows);
    match &args.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            println!("wrote {} bench rows to {}", rows.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
