//! Subcommand implementations shared by the `eraser` binary and its tests.

use anyhow::{bail, Context, Result};
use eraser_core::clients::SegmenterClient;
use eraser_core::eval::{evaluate, MetricsReport};
use eraser_core::olrd::{build_sample, write_dataset, Manifest, OlrdConfig};
use eraser_core::panoptic::PanopticScene;
use eraser_core::raster::{decode_png, encode_png, Mask, Rgb8Image};
use eraser_core::rle::Rle;
use eraser_core::service::{EraseConfig, Eraser, EraserClients, EraserModel, ModelConfig};
use eraser_core::toy::{toy_panoptic_scene, EchoVlm, PaletteSegmenter, PixelStatsExtractor, ToyVae};
use eraser_core::tuning::{
    train, Checkpoint, CheckpointSink, DirCheckpointSink, DiskDataset, LogSink, StepContext, TrainConfig, TrainRun,
};
use std::path::{Path, PathBuf};

pub const MODEL_DIR_ENV: &str = "ERASER_MODEL_DIR";
pub const DEVICE_ENV: &str = "ERASER_DEVICE";

/// Only the CPU backend exists; anything else is refused rather than
/// silently ignored.
pub fn check_device(device: Option<&str>) -> Result<()> {
    match device {
        None | Some("") | Some("cpu") => Ok(()),
        Some(other) => bail!("{DEVICE_ENV}={other} is not available; only \"cpu\" is supported"),
    }
}

/// Tuned model from `dir` when given, otherwise the untuned toy model.
pub fn load_model(dir: Option<&Path>) -> Result<EraserModel> {
    match dir {
        Some(d) => EraserModel::load(d).with_context(|| format!("loading model from {}", d.display())),
        None => {
            let cfg = ModelConfig::default();
            Ok(EraserModel::toy(cfg.unet, cfg.text_seed))
        }
    }
}

pub fn eraser_from_env() -> Result<Eraser> {
    check_device(std::env::var(DEVICE_ENV).ok().as_deref())?;
    let dir = std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from);
    Ok(Eraser::new(load_model(dir.as_deref())?, EraserClients::toy()))
}

pub fn read_image(path: &Path) -> Result<Rgb8Image> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_png(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// A mask file is either a PNG (nonzero pixels are on) or RLE JSON.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"\x89PNG") {
        return Mask::from_png(&bytes).with_context(|| format!("decoding {}", path.display()));
    }
    let rle: Rle = serde_json::from_slice(&bytes).with_context(|| format!("{} is neither PNG nor RLE JSON", path.display()))?;
    rle.decode().with_context(|| format!("decoding RLE in {}", path.display()))
}

pub fn run_erase(eraser: &Eraser, image: &Path, mask: &Path, out: &Path, cfg: &EraseConfig) -> Result<()> {
    let img = read_image(image)?;
    let m = read_mask(mask)?;
    let result = eraser.erase(&img, &m, cfg)?;
    std::fs::write(out, encode_png(&result)?).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

pub struct DatasetArgs {
    pub out: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub shard_size: usize,
    /// PNG scenes to draw from; toy scenes when absent.
    pub images: Option<PathBuf>,
    pub size: u32,
}

fn scene_sources(args: &DatasetArgs) -> Result<Vec<(String, PanopticScene)>> {
    let Some(dir) = &args.images else {
        return Ok((0..args.count as u64)
            .map(|i| (format!("toy:{}", args.seed + i), toy_panoptic_scene(args.seed + i, args.size, args.size)))
            .collect());
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let segmenter = PaletteSegmenter::default();
    paths
        .iter()
        .map(|p| {
            let image = read_image(p)?;
            let segments = segmenter.panoptic(&image)?;
            Ok((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), PanopticScene { image, segments }))
        })
        .collect()
}

/// Build up to `count` samples; scenes without an eligible object or
/// placement are skipped with a warning.
pub fn run_build_dataset(args: &DatasetArgs) -> Result<Manifest> {
    let cfg = OlrdConfig::default();
    let mut samples = Vec::new();
    for (i, (source, scene)) in scene_sources(args)?.iter().enumerate() {
        if samples.len() == args.count {
            break;
        }
        match build_sample(scene, source, args.seed + i as u64, &EchoVlm, &cfg) {
            Ok(s) => samples.push(s),
            Err(e) => log::warn!("skipping {source}: {e}"),
        }
    }
    if samples.is_empty() {
        bail!("no scene produced a sample");
    }
    Ok(write_dataset(&samples, &args.out, args.shard_size.max(1))?)
}

pub struct TrainArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub config: TrainConfig,
    pub resume: Option<PathBuf>,
}

/// Train against the model described by `out/model.json` (written with
/// defaults when missing) and leave every checkpoint, including the final
/// one, in `out`.
pub fn run_train(args: &TrainArgs) -> Result<Checkpoint> {
    let model_cfg = ModelConfig::load(&args.out)?;
    model_cfg.save(&args.out)?;
    let model = EraserModel::toy(model_cfg.unet, model_cfg.text_seed);
    let dataset = DiskDataset::open(&args.dataset, &ToyVae)?;
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let ctx = StepContext { model: &model.unet, encoder: model.encoder.as_ref(), schedule: &model.schedule };
    let mut sink = DirCheckpointSink::new(&args.out);
    let mut telemetry = LogSink { every: 10 };
    let outcome = train(
        &ctx,
        TrainRun {
            config: &args.config,
            dataset: &dataset,
            checkpoints: &mut sink,
            telemetry: &mut telemetry,
            resume: resume.as_ref(),
        },
    )?;
    let ckpt = outcome.checkpoint(&args.config);
    sink.save(&ckpt)?;
    Ok(ckpt)
}

/// Writes the JSON report to `out` and the text table next to it.
pub fn run_eval(results: &Path, refs: &Path, out: &Path) -> Result<MetricsReport> {
    let report = evaluate(results, refs, &PixelStatsExtractor)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.with_extension("txt"), report.to_table())?;
    Ok(report)
}
