//! Command-line front end for the compression enhancement pipeline.
//!
//! Subcommands cover the three training stages, baseline compression and
//! decompression, decoder-side enhancement, corpus evaluation, codebook
//! statistics and codebook export. Exit codes: 0 success, 2 configuration
//! error, 3 missing dependency (checkpoints, locks), 4 data error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Parser, Subcommand, ValueEnum};
use code_rsic::checkpoint::{self, Manifest, StageRecord};
use code_rsic::codec::{Bitstream, Compressor, MiniCodec, MiniCodecConfig, StubCodec};
use code_rsic::data::{build_pairs, crop_patches, procedural_texture, CorpusManifest, PatchSpec, Split};
use code_rsic::fusion::hpin_decode;
use code_rsic::metrics::{evaluate_pair, msssim_scales};
use code_rsic::train::{self, Pipeline, RunConfig, TrainReport};
use code_rsic::vq::{export_codebook, usage_stats};
use code_rsic::{Error, ImageTensor, Result};

#[derive(Parser)]
#[command(name = "code-rsic", version, about = "Codebook-prior enhancement for compressed images")]
struct Cli {
    /// Run configuration file (TOML); overrides --profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed; overrides the one in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Named configuration profile.
    #[arg(long, global = true, default_value = "toy")]
    profile: String,

    /// Baseline codec used for degradation and compression.
    #[arg(long, global = true, value_enum, default_value_t = CodecKind::Stub)]
    codec: CodecKind,

    /// Codec operating point (stub: 0..=7, mini: 0..=4).
    #[arg(long, global = true, default_value_t = 3)]
    rate_index: u8,

    /// Run directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecKind {
    Stub,
    Mini,
}

#[derive(Subcommand)]
enum Command {
    /// Train the codebook autoencoder on clean patches.
    TrainStage1(TrainArgs),
    /// Train the code predictor on degraded/clean pairs.
    TrainStage2(TrainArgs),
    /// Train the enhancement network.
    TrainStage3(TrainArgs),
    /// Compress one image to a bitstream file.
    Compress {
        /// Input PNG.
        #[arg(long)]
        input: PathBuf,
        /// Output bitstream file.
        #[arg(long)]
        output: PathBuf,
    },
    /// Decode a bitstream file back to a PNG.
    Decompress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decode a bitstream and run decoder-side enhancement on the result.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Measure rate and quality over a corpus; writes a CSV report.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic corpus size when --data is absent.
        #[arg(long, default_value_t = 5)]
        count: usize,
        /// Also run enhancement (requires a stage-3 checkpoint).
        #[arg(long)]
        enhanced: bool,
    },
    /// Report codebook usage over a corpus.
    Stats {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Write the learned codebook as a standalone CBK1 file.
    ExportCodebook {
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Corpus manifest (`split,path` lines). Synthetic textures when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic corpus size when --data is absent.
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Cap on optimizer steps, overriding the profile schedule.
    #[arg(long)]
    steps: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Dependency(_) => 3,
        Error::Data(_) | Error::Io(_) | Error::PatchCodec { .. } => 4,
        Error::Stage { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainStage1(args) => train_stage(cli, args, 1),
        Command::TrainStage2(args) => train_stage(cli, args, 2),
        Command::TrainStage3(args) => train_stage(cli, args, 3),
        Command::Compress { input, output } => {
            let img = ImageTensor::load_png(input)?;
            let bits = make_codec(cli)?.compress(&img)?;
            fs::write(output, bits.to_bytes())?;
            println!("wrote {} bytes", Bitstream::HEADER_LEN + bits.payload.len());
            Ok(())
        }
        Command::Decompress { input, output } => {
            let bits = Bitstream::from_bytes(&fs::read(input)?)?;
            let img = codec_for_bitstream(&bits)?.decompress(&bits)?;
            img.save_png(output)
        }
        Command::Enhance { input, output } => {
            let bits = Bitstream::from_bytes(&fs::read(input)?)?;
            let decoded = codec_for_bitstream(&bits)?.decompress(&bits)?;
            let (p, _) = load_pipeline(cli, 3)?;
            let enhanced = hpin_decode(&decoded, &p.predictor, &p.vq, &p.hpin)?;
            enhanced.save_png(output)
        }
        Command::Evaluate { data, count, enhanced } => evaluate(cli, data.as_deref(), *count, *enhanced),
        Command::Stats { data, count } => stats(cli, data.as_deref(), *count),
        Command::ExportCodebook { output } => {
            let (p, _) = load_pipeline(cli, 1)?;
            fs::write(output, export_codebook(p.vq.codebook())?)?;
            println!("codebook written to {}", output.display());
            Ok(())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_toml(&fs::read_to_string(path)?)?,
        None => RunConfig::by_profile(&cli.profile, 0)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn make_codec(cli: &Cli) -> Result<Box<dyn Compressor>> {
    match cli.codec {
        CodecKind::Stub => Ok(Box::new(StubCodec::from_rate_index(cli.rate_index)?)),
        CodecKind::Mini => Ok(Box::new(MiniCodec::new(MiniCodecConfig::default(), cli.rate_index)?)),
    }
}

/// Rebuilds the codec a bitstream was produced with from its header.
fn codec_for_bitstream(bits: &Bitstream) -> Result<Box<dyn Compressor>> {
    match bits.codec_id {
        code_rsic::codec::CODEC_ID_STUB => Ok(Box::new(StubCodec::from_encoded_rate(bits.rate_index)?)),
        code_rsic::codec::CODEC_ID_MINI => Ok(Box::new(MiniCodec::new(MiniCodecConfig::default(), bits.rate_index)?)),
        other => Err(Error::Format(format!("unknown codec id {other}"))),
    }
}

/// Loads the pipeline with weights from the checkpoint of `stage`.
fn load_pipeline(cli: &Cli, stage: u8) -> Result<(Pipeline, RunConfig)> {
    let cfg = load_config(cli)?;
    let mut p = Pipeline::new(&cfg, &Device::Cpu)?;
    let hash = checkpoint::config_hash(&cfg.to_toml()?);
    require_stage(&cli.out, stage)?;
    checkpoint::load_stage(&cli.out, stage, Some(&hash), &mut p.vs)?;
    Ok((p, cfg))
}

/// Names the missing stage so the operator knows what to run first.
fn require_stage(dir: &Path, stage: u8) -> Result<()> {
    let manifest = checkpoint::load_manifest(dir)
        .map_err(|_| missing_stage(stage))?;
    if !manifest.stage_completed(stage) {
        return Err(missing_stage(stage));
    }
    Ok(())
}

fn missing_stage(stage: u8) -> Error {
    Error::Dependency(format!(
        "stage {stage} checkpoint not found; run train-stage{stage} first"
    ))
}

/// Exclusive ownership of a run directory while training writes to it.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Dependency(
                format!("run directory {} is locked by another process", dir.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Training patches: PNGs from a manifest when given, otherwise seeded
/// synthetic textures (cached under `CODE_RSIC_CACHE` when set).
fn load_patches(data: Option<&Path>, split: Split, size: usize, count: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    match data {
        Some(path) => {
            let manifest = CorpusManifest::load(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let mut patches = Vec::new();
            for rel in manifest.paths(split) {
                let img = ImageTensor::load_png(&base.join(rel))?;
                patches.extend(crop_patches(
                    &img,
                    &PatchSpec { size, count: 4, seed },
                )?);
            }
            if patches.is_empty() {
                return Err(Error::Data("corpus manifest has no images for this split".into()));
            }
            Ok(patches)
        }
        None => synthetic_corpus(split, size, count, seed),
    }
}

fn synthetic_corpus(split: Split, size: usize, count: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    // disjoint seed ranges keep the held-out set truly held out
    let offset = match split {
        Split::Train => 0u64,
        Split::Test => 1 << 32,
    };
    let cache = std::env::var_os("CODE_RSIC_CACHE").map(PathBuf::from);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let id = seed ^ (offset + i as u64);
        if let Some(dir) = &cache {
            let path = dir.join(format!("tex-{size}-{id:016x}.png"));
            if path.exists() {
                out.push(ImageTensor::load_png(&path)?);
                continue;
            }
            let img = procedural_texture(size, id);
            fs::create_dir_all(dir)?;
            img.save_png(&path)?;
            out.push(img);
        } else {
            out.push(procedural_texture(size, id));
        }
    }
    Ok(out)
}

fn train_stage(cli: &Cli, args: &TrainArgs, stage: u8) -> Result<()> {
    let mut cfg = load_config(cli)?;
    // the hash identifies the run's configuration; a --steps override only
    // shortens or extends training and must not split the run directory
    let hash = checkpoint::config_hash(&cfg.to_toml()?);
    if let Some(steps) = args.steps {
        match stage {
            1 => cfg.stage1.steps = steps,
            2 => cfg.stage2.steps = steps,
            _ => cfg.stage3.steps = steps,
        }
    }
    let _lock = RunLock::acquire(&cli.out)?;

    let mut p = Pipeline::new(&cfg, &Device::Cpu)?;
    let mut manifest = match checkpoint::load_manifest(&cli.out) {
        Ok(m) => {
            if m.config_hash != hash {
                return Err(Error::Config(format!(
                    "run directory {} was created with a different configuration",
                    cli.out.display()
                )));
            }
            m
        }
        Err(_) => Manifest::new(hash.clone(), cfg.profile.clone(), cfg.seed),
    };

    // later stages start from the previous stage's weights
    if stage > 1 {
        require_stage(&cli.out, stage - 1)?;
        checkpoint::load_stage(&cli.out, stage - 1, Some(&hash), &mut p.vs)?;
    }

    let patches = load_patches(args.data.as_deref(), Split::Train, cfg.patch_size, args.count, cfg.seed)?;
    let held = load_patches(args.data.as_deref(), Split::Test, cfg.patch_size, (args.count / 8).max(2), cfg.seed)?;

    let report = match stage {
        1 => train::train_stage1(&p, &patches, &held)?,
        _ => {
            p.predictor.init_from_stage1(&p.vs)?;
            let codec = make_codec(cli)?;
            let pairs = build_pairs(&patches, codec.as_ref(), codec.rate_param())?;
            let vpairs = build_pairs(&held, codec.as_ref(), codec.rate_param())?;
            if stage == 2 {
                train::train_stage2(&p, &pairs, &vpairs)?
            } else {
                train::train_stage3(&p, &pairs, &vpairs)?
            }
        }
    };

    write_loss_curve(&cli.out, stage, &report)?;
    checkpoint::save_stage(
        &cli.out,
        &mut manifest,
        StageRecord {
            stage,
            step: report.steps_run,
            completed: true,
            best_metric: report.best_val,
        },
        &p.vs,
        None,
    )?;
    if stage == 1 {
        fs::write(checkpoint::codebook_path(&cli.out), export_codebook(p.vq.codebook())?)?;
    }
    println!(
        "stage {stage} finished after {} steps (final loss {:.4})",
        report.steps_run,
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn write_loss_curve(dir: &Path, stage: u8, report: &TrainReport) -> Result<()> {
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.6}\n"));
    }
    fs::write(dir.join(format!("stage{stage}_loss.csv")), csv)?;
    Ok(())
}

fn evaluate(cli: &Cli, data: Option<&Path>, count: usize, enhanced: bool) -> Result<()> {
    let cfg = load_config(cli)?;
    let images = load_patches(data, Split::Test, cfg.patch_size.max(64), count, cfg.seed)?;
    let codec = make_codec(cli)?;
    let pipeline = if enhanced { Some(load_pipeline(cli, 3)?.0) } else { None };

    let mut csv = String::from("image,bpp,psnr,ms_ssim,perc_proxy\n");
    let (mut s_bpp, mut s_psnr, mut s_ms, mut s_px) = (0.0, 0.0, 0.0, 0.0);
    for (i, img) in images.iter().enumerate() {
        let bits = codec.compress(img)?;
        let bpp = code_rsic::codec::bpp_of(&bits, img.width(), img.height(), true)?;
        let mut dec = codec.decompress(&bits)?;
        if let Some(p) = &pipeline {
            dec = hpin_decode(&dec, &p.predictor, &p.vq, &p.hpin)?;
        }
        let (psnr, ms, px) = evaluate_pair(img, &dec)?;
        csv.push_str(&format!("{i},{bpp:.6},{psnr:.4},{ms:.6},{px:.6}\n"));
        s_bpp += bpp;
        s_psnr += psnr;
        s_ms += ms;
        s_px += px;
    }
    let n = images.len() as f64;
    csv.push_str(&format!(
        "mean,{:.6},{:.4},{:.6},{:.6}\n",
        s_bpp / n,
        s_psnr / n,
        s_ms / n,
        s_px / n
    ));
    fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("evaluation.csv");
    fs::write(&path, &csv)?;
    print!("{csv}");
    println!("report written to {}", path.display());
    Ok(())
}

fn stats(cli: &Cli, data: Option<&Path>, count: usize) -> Result<()> {
    let (p, cfg) = load_pipeline(cli, 1)?;
    let images = load_patches(data, Split::Test, cfg.patch_size, count, cfg.seed)?;
    let report = usage_stats(&images, &p.vq)?;
    let used = report.counts.iter().filter(|&&c| c > 0).count();
    println!(
        "codebook usage over {} images: {}/{} codes used ({:.1}%)",
        images.len(),
        used,
        report.counts.len(),
        100.0 * report.fraction_used
    );
    let n = report.overlap.len();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            sum += report.overlap[i][j];
            pairs += 1;
        }
    }
    if pairs > 0 {
        println!("mean pairwise used-set overlap: {:.3}", sum / pairs as f64);
    }
    // sanity line so the operator notices degenerate inputs
    let scales = msssim_scales(cfg.patch_size, cfg.patch_size);
    println!("patch size {} supports {} evaluation scales", cfg.patch_size, scales);
    Ok(())
}
