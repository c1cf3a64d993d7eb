use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use rvos::geometry::BoundingBox;
use rvos::metrics::Protocol;
use rvos::pipeline::evaluate::write_evaluation;
use rvos::pipeline::train::FINAL_CHECKPOINT;
use rvos::pipeline::{
    ablate, evaluate, infer, restore, train, BoxSource, Checkpoint, Proposer, RunConfig, TrainOptions,
};
use rvos::segmenter::{build_adapter, OracleAdapter, SegmentAdapter};
use rvos::synthdata::io::{
    frame_file, generate_dataset, load_dataset, mask_file, read_frame, read_mask, write_mask, DatasetConfig,
};
use rvos::synthdata::GenerationSpec;

#[derive(Parser)]
#[command(name = "rvos", version, about = "Box-supervised referring video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a TOML description.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the box proposal generator.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps in total.
        #[arg(long)]
        stop_at_step: Option<usize>,
    },
    /// Segment one video for one sentence, frame by frame.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding frame_000.png, frame_001.png, ...
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        sentence: String,
        /// `oracle` (reads mask_TTT_objK.png next to the frames) or `color-box`.
        #[arg(long, default_value = "color-box")]
        adapter: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `davis` or `a2d`.
        #[arg(long, default_value = "davis")]
        protocol: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the adapter named in the checkpoint's config.
        #[arg(long)]
        adapter: Option<String>,
        /// Prompt with ground-truth boxes instead of the generator.
        #[arg(long)]
        gt_boxes: bool,
    },
    /// Train both loss arms and compare them with the baseline and upper bound.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Dataset description accepted by `gen-data`. Unknown keys are errors.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSpec {
    videos: usize,
    frames: usize,
    objects: usize,
    size: usize,
    motion_only_pairs: bool,
    seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        let g = GenerationSpec::default();
        Self {
            videos: 8,
            frames: g.frames,
            objects: g.objects,
            size: g.size,
            motion_only_pairs: g.motion_only_pairs,
            seed: 0,
        }
    }
}

impl From<DataSpec> for DatasetConfig {
    fn from(d: DataSpec) -> Self {
        DatasetConfig {
            videos: d.videos,
            video: GenerationSpec {
                frames: d.frames,
                objects: d.objects,
                size: d.size,
                motion_only_pairs: d.motion_only_pairs,
            },
            seed: d.seed,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::Train {
            config,
            out,
            resume,
            stop_at_step,
        } => train_cmd(&config, &out, resume.as_deref(), stop_at_step),
        Command::Infer {
            ckpt,
            video,
            sentence,
            adapter,
            out,
        } => infer_cmd(&ckpt, &video, &sentence, &adapter, &out),
        Command::Evaluate {
            ckpt,
            data,
            protocol,
            out,
            adapter,
            gt_boxes,
        } => evaluate_cmd(&ckpt, &data, &protocol, &out, adapter, gt_boxes),
        Command::Ablate { config, out } => ablate_cmd(&config, &out),
    }
}

fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let spec: DataSpec = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let manifest = generate_dataset(&spec.into(), out)?;
    println!("{}", manifest.display());
    Ok(())
}

/// Loads a run config and resolves its data paths against the config's directory.
fn load_config(path: &Path) -> Result<(RunConfig, PathBuf, Option<PathBuf>)> {
    let cfg = RunConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let train_dir = base.join(&cfg.data_dir);
    let eval_dir = (!cfg.eval_dir.is_empty()).then(|| base.join(&cfg.eval_dir));
    Ok((cfg, train_dir, eval_dir))
}

fn train_cmd(config: &Path, out: &Path, resume: Option<&Path>, stop_at_step: Option<usize>) -> Result<()> {
    let (cfg, data_dir, _) = load_config(config)?;
    let samples = load_dataset(&data_dir).with_context(|| format!("loading {}", data_dir.display()))?;
    let weak: Vec<_> = samples.iter().map(|s| s.weak()).collect();
    let resume = resume.map(Checkpoint::load).transpose()?;
    let outcome = train(
        &cfg,
        &weak,
        TrainOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            stop_at_step,
        },
    )?;
    let ck = &outcome.checkpoint;
    if let Some(last) = ck.history.last() {
        log::info!("step {} total loss {:.5}", last.step, last.losses.total);
    }
    println!("{}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn read_frames(dir: &Path) -> Result<Vec<rvos::synthdata::Frame>> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_file(frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(read_frame(&path)?);
    }
    if frames.is_empty() {
        bail!("no {} in {}", frame_file(0), dir.display());
    }
    Ok(frames)
}

/// Oracle adapter from the per-object masks stored next to the frames.
fn oracle_from_dir(dir: &Path, frames: usize) -> Result<OracleAdapter> {
    let mut boxes = Vec::with_capacity(frames);
    let mut masks = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut row = Vec::new();
        while dir.join(mask_file(t, row.len())).exists() {
            row.push(read_mask(&dir.join(mask_file(t, row.len())))?);
        }
        if row.is_empty() {
            bail!("the oracle adapter needs {} in {}", mask_file(t, 0), dir.display());
        }
        boxes.push(
            row.iter()
                .map(|m| m.tight_box().unwrap_or(BoundingBox::raw(0.0, 0.0, 0.0, 0.0)))
                .collect(),
        );
        masks.push(row);
    }
    Ok(OracleAdapter::new(boxes, masks))
}

fn infer_cmd(ckpt: &Path, video: &Path, sentence: &str, adapter: &str, out: &Path) -> Result<()> {
    let (model, _) = restore(&Checkpoint::load(ckpt)?)?;
    let frames = read_frames(video)?;
    let adapter: Box<dyn SegmentAdapter> = if adapter == OracleAdapter::NAME {
        Box::new(oracle_from_dir(video, frames.len())?)
    } else {
        build_adapter(adapter, None)?
    };
    let results = infer(BoxSource::model(&model, sentence)?, &frames, adapter.as_ref())?;
    std::fs::create_dir_all(out)?;
    for r in &results {
        write_mask(&out.join(format!("mask_{:03}.png", r.frame)), &r.mask)?;
    }
    let summary: Vec<_> = results.iter().map(|r| r.summary()).collect();
    std::fs::write(out.join("frames.json"), serde_json::to_string_pretty(&summary)?)?;
    for s in &summary {
        let [cx, cy, w, h] = s.bbox.to_array();
        println!(
            "frame {:3}  box ({cx:.3}, {cy:.3}, {w:.3}, {h:.3})  confidence {:.3}  pixels {}",
            s.frame, s.confidence, s.mask_pixels
        );
    }
    Ok(())
}

fn evaluate_cmd(
    ckpt: &Path,
    data: &Path,
    protocol: &str,
    out: &Path,
    adapter: Option<String>,
    gt_boxes: bool,
) -> Result<()> {
    let protocol: Protocol = protocol.parse().map_err(anyhow::Error::msg)?;
    let ck = Checkpoint::load(ckpt)?;
    let (model, _) = restore(&ck)?;
    let samples = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let adapter = adapter.unwrap_or_else(|| ck.config.adapter.clone());
    let proposer = if gt_boxes {
        Proposer::GroundTruth
    } else {
        Proposer::Model(&model)
    };
    let ev = evaluate(proposer, &samples, protocol, &adapter)?;
    write_evaluation(&ev, out)?;
    let m = &ev.metrics;
    println!(
        "Box {:.2}  J&F {:.4}  J {:.4}  F {:.4}  oIoU {:.4}  mIoU {:.4}",
        ev.boxes.score, m.jf_mean, m.j_mean, m.f_mean, m.overall_iou, m.mean_iou
    );
    Ok(())
}

fn ablate_cmd(config: &Path, out: &Path) -> Result<()> {
    let (cfg, train_dir, eval_dir) = load_config(config)?;
    let train_set = load_dataset(&train_dir).with_context(|| format!("loading {}", train_dir.display()))?;
    let eval_set = match eval_dir {
        Some(d) => load_dataset(&d).with_context(|| format!("loading {}", d.display()))?,
        None => train_set.clone(),
    };
    let table = ablate(&cfg, &train_set, &eval_set, Some(out))?;
    print!("{}", table.to_markdown());
    Ok(())
}
