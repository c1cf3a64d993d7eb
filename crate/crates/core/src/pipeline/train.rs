//! Training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Mat, Tape, Var};
use crate::error::{ConfigError, Error, Result};
use crate::geometry::{iou_raw, BoundingBox};
use crate::losses::{box_loss_on, modalcon_on, textcon_on, total_on, LossBreakdown, LossVars};
use crate::model::{select_top, ProposalModel, TextTokens};
use crate::params::ParamId;
use crate::rng;
use crate::segmenter::FrozenSegmenter;
use crate::synthdata::{tokenize, WeakSample};

use super::checkpoint::Checkpoint;
use super::config::{Arm, RunConfig};
use super::optim::Optimizer;
use super::StepRecord;

/// One anchor clip of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanItem {
    pub video: usize,
    pub anchor: usize,
    pub negative: Option<usize>,
    pub start: usize,
    pub len: usize,
}

/// Visiting order of an epoch: every expression of every video once, shuffled,
/// each with a clip window and a negative expression from the same video.
/// Depends only on `(seed, epoch)` and the dataset shape.
pub fn epoch_plan(seed: u64, epoch: usize, data: &[WeakSample<'_>], clip_len: usize) -> Vec<PlanItem> {
    let mut rng = rng::stream(seed, &format!("epoch.{epoch}"));
    let mut pairs: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(v, s)| (0..s.expressions.len()).map(move |e| (v, e)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs
        .into_iter()
        .map(|(video, anchor)| {
            let s = &data[video];
            let t = s.frames.len();
            let len = clip_len.min(t);
            let start = rng.random_range(0..=t - len);
            let m = s.expressions.len();
            let negative = (m >= 2).then(|| {
                let k = rng.random_range(0..m - 1);
                if k >= anchor {
                    k + 1
                } else {
                    k
                }
            });
            PlanItem {
                video,
                anchor,
                negative,
                start,
                len,
            }
        })
        .collect()
}

/// Options that do not affect results and so stay out of the config hash.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for logs and checkpoints; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// State to continue from. Its config must hash to the same value.
    pub resume: Option<Checkpoint>,
    /// Stop (and checkpoint) after this many total steps.
    pub stop_at_step: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
}

/// Checks that a dataset can be trained under `cfg` without touching it.
pub fn check_dataset(cfg: &RunConfig, data: &[WeakSample<'_>]) -> Result<()> {
    if data.is_empty() {
        return Err(ConfigError::Invalid("training set is empty".into()).into());
    }
    for s in data {
        if s.frames.is_empty() || s.gt_boxes.len() != s.frames.len() {
            return Err(ConfigError::Invalid(format!("video {} has no aligned boxes", s.id)).into());
        }
        if cfg.arm.is_contrastive() && s.expressions.len() < 2 {
            return Err(ConfigError::Invalid(format!(
                "video {} has {} expression(s); the {} arm needs at least 2",
                s.id,
                s.expressions.len(),
                cfg.arm.as_str()
            ))
            .into());
        }
        for e in s.expressions {
            tokenize(&e.text)?;
        }
    }
    Ok(())
}

/// Fresh model and segmenter for a config.
pub fn initialize(cfg: &RunConfig) -> Result<(ProposalModel, FrozenSegmenter)> {
    let model = ProposalModel::new(cfg.model(), cfg.seed)?;
    let seg = FrozenSegmenter::new(cfg.segmenter(), cfg.seed);
    Ok((model, seg))
}

/// The per-clip objective over a fixed box-supervised dataset.
pub struct Trainer<'d, 'a> {
    cfg: RunConfig,
    data: &'d [WeakSample<'a>],
    model: ProposalModel,
    seg: FrozenSegmenter,
    /// Frozen image features per video and frame, contrastive arm only.
    features: Vec<Vec<Mat>>,
}

impl<'d, 'a> Trainer<'d, 'a> {
    pub fn new(
        cfg: &RunConfig,
        data: &'d [WeakSample<'a>],
        model: ProposalModel,
        seg: FrozenSegmenter,
    ) -> Result<Self> {
        let features = if cfg.arm.is_contrastive() {
            data.iter()
                .map(|s| {
                    s.frames
                        .iter()
                        .map(|f| Ok(seg.frozen_image_encode(f)?.tokens))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            cfg: cfg.clone(),
            data,
            model,
            seg,
            features,
        })
    }

    pub fn model(&self) -> &ProposalModel {
        &self.model
    }

    fn text(&self, sentence: &str) -> Result<TextTokens> {
        Ok(self.model.encode_text(&tokenize(sentence)?)?)
    }

    /// Loss and gradients of one clip. Gradients follow `trainable` order.
    pub fn clip_step(&self, item: &PlanItem, trainable: &[ParamId]) -> Result<(LossBreakdown, Vec<Mat>)> {
        let sample = &self.data[item.video];
        let model = &self.model;
        let w = self.cfg.arm_weights();
        let contrastive = self.cfg.arm.is_contrastive();
        let gt_all = sample.boxes_for_expression(item.anchor);
        let gt: Vec<BoundingBox> = gt_all[item.start..item.start + item.len].to_vec();

        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let txt_i = self.text(&sample.expressions[item.anchor].text)?;
        let ti = model.text_on(&mut tape, &txt_i);
        let tmi = model.text_memory_on(&mut tape, &bind, ti);
        let neg = match (contrastive, item.negative) {
            (true, Some(j)) => {
                let txt_j = self.text(&sample.expressions[j].text)?;
                let tj = model.text_on(&mut tape, &txt_j);
                let tmj = model.text_memory_on(&mut tape, &bind, tj);
                Some((txt_j, tj, tmj))
            }
            _ => None,
        };

        let mut selected = Vec::with_capacity(item.len);
        let mut cls_terms = Vec::with_capacity(item.len);
        let mut p_anchor: Vec<Var> = Vec::new();
        let mut p_pos: Vec<Var> = Vec::new();
        let mut p_neg: Vec<Var> = Vec::new();
        let mut feats: Vec<Var> = Vec::new();
        for (k, g) in gt.iter().enumerate() {
            let t = item.start + k;
            let v = model.encode_frame_on(&mut tape, &bind, &sample.frames[t])?;
            let vm = model.visual_memory_on(&mut tape, &bind, v);
            let out = model.forward_frame_on(&mut tape, &bind, v, &vm, ti, tmi.as_ref())?;
            let set = out.to_set(&tape);
            let (top, _) = select_top(&set)?;
            let sel = tape.select_rows(out.boxes, &[top]);
            selected.push(sel);

            let mut best = (0, f64::NEG_INFINITY);
            for (q, p) in set.proposals.iter().enumerate() {
                let v = iou_raw(&p.bbox, g);
                if v > best.1 {
                    best = (q, v);
                }
            }
            let mut targets = vec![0.0; set.len()];
            targets[best.0] = 1.0;
            cls_terms.push(tape.bce_with_logits(out.conf_logits, &targets));

            if let Some((_, tj, tmj)) = &neg {
                let out_j = model.forward_frame_on(&mut tape, &bind, v, &vm, *tj, tmj.as_ref())?;
                let (top_j, _) = select_top(&out_j.to_set(&tape))?;
                let sel_j = tape.select_rows(out_j.boxes, &[top_j]);
                let gt_row = tape.row(&g.to_array());
                p_anchor.push(self.seg.prompt_encode_on(&mut tape, sel));
                p_pos.push(self.seg.prompt_encode_on(&mut tape, gt_row));
                p_neg.push(self.seg.prompt_encode_on(&mut tape, sel_j));
                feats.push(tape.constant(self.features[item.video][t].clone()));
            }
        }

        let box_loss = box_loss_on(&mut tape, &selected, &gt, &w)?;
        let mut cls = cls_terms[0];
        for &c in &cls_terms[1..] {
            cls = tape.add(cls, c);
        }
        let (textcon, modalcon) = match &neg {
            Some((txt_j, _, _)) => {
                let opts = self.cfg.triplet();
                let tc = textcon_on(&mut tape, &p_anchor, &p_pos, &p_neg, opts)?;
                let video = self.seg.aggregate_on(&mut tape, &p_anchor, &feats)?;
                let zi = tape.row(&self.seg.sentence_feature(&txt_i));
                let zj = tape.row(&self.seg.sentence_feature(txt_j));
                let mc = modalcon_on(&mut tape, video, zi, zj, opts)?;
                (Some(tc), Some(mc))
            }
            None => (None, None),
        };
        let vars = LossVars {
            box_loss,
            cls: Some(cls),
            textcon,
            modalcon,
        };
        let (total, breakdown) = total_on(&mut tape, &vars, &w);
        let grads = tape.backward(total);
        let out = trainable
            .iter()
            .map(|&id| {
                let v = bind.var(id);
                grads.get_or_zeros(v, tape.shape(v))
            })
            .collect();
        Ok((breakdown, out))
    }
}

struct Logs {
    losses: BufWriter<File>,
    timing: BufWriter<File>,
}

fn open_append(path: &Path, truncate: bool) -> Result<BufWriter<File>> {
    let f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!truncate)
        .truncate(truncate)
        .open(path)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(BufWriter::new(f))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn limit_from_config(cfg: &RunConfig) -> usize {
    if cfg.max_steps == 0 {
        usize::MAX
    } else {
        cfg.max_steps
    }
}

pub const LOSS_LOG: &str = "train_log.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Trains on box-only samples. With the grounding-only arm no step is taken
/// and the initial state is returned.
pub fn train(cfg: &RunConfig, data: &[WeakSample<'_>], opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let (mut model, mut seg) = initialize(cfg)?;
    let mut optimizer = Optimizer::new(cfg, model.params());
    let mut epoch = 0;
    let mut step = 0;
    let mut history = Vec::new();
    if let Some(ck) = &opts.resume {
        if ck.config.hash() != cfg.hash() {
            return Err(crate::error::CheckpointError::Incompatible(
                "resume checkpoint was written with a different config".into(),
            )
            .into());
        }
        model.load_params(&ck.model)?;
        seg.load_params(&ck.segmenter)?;
        optimizer = ck.optimizer.clone();
        epoch = ck.epoch;
        step = ck.step;
        history = ck.history.clone();
    }

    let mut logs = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let fresh = opts.resume.is_none();
            Some(Logs {
                losses: open_append(&dir.join(LOSS_LOG), fresh)?,
                timing: open_append(&dir.join(TIMING_LOG), fresh)?,
            })
        }
        None => None,
    };

    let mut trainer = Trainer::new(cfg, data, model, seg)?;
    let trainable = trainer.model.params().trainable_ids();
    let started = Instant::now();
    let limit = match (cfg.max_steps, opts.stop_at_step) {
        (0, None) => usize::MAX,
        (0, Some(s)) => s,
        (m, None) => m,
        (m, Some(s)) => m.min(s),
    };

    let snapshot = |t: &Trainer, opt: &Optimizer, epoch, step, history: &Vec<StepRecord>| Checkpoint {
        config: cfg.clone(),
        epoch,
        step,
        model: t.model.params().clone(),
        segmenter: t.seg.params().clone(),
        optimizer: opt.clone(),
        history: history.clone(),
    };

    let per_epoch = data.iter().map(|s| s.expressions.len()).sum::<usize>().div_ceil(cfg.batch_size);
    let total_steps = (per_epoch * cfg.epochs).min(limit_from_config(cfg));

    if cfg.arm != Arm::GroundingOnly {
        'epochs: while epoch < cfg.epochs {
            let plan = epoch_plan(cfg.seed, epoch, data, cfg.clip_len);
            let steps_per_epoch = plan.len().div_ceil(cfg.batch_size);
            let epoch_start = history
                .iter()
                .filter(|r: &&StepRecord| r.epoch < epoch)
                .count();
            let done_in_epoch = step - epoch_start;
            for (k, batch) in plan.chunks(cfg.batch_size).enumerate().skip(done_in_epoch) {
                if step >= limit {
                    break 'epochs;
                }
                let mut sum: Option<Vec<Mat>> = None;
                let mut parts = Vec::with_capacity(batch.len());
                for item in batch {
                    let (br, g) = trainer.clip_step(item, &trainable)?;
                    parts.push(br);
                    match &mut sum {
                        None => sum = Some(g),
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, g)| *a += &g),
                    }
                }
                let n = batch.len() as f64;
                let grads: Vec<(ParamId, Mat)> = trainable
                    .iter()
                    .copied()
                    .zip(sum.expect("non-empty batch"))
                    .map(|(id, g)| (id, if n > 1.0 { g / n } else { g }))
                    .collect();
                optimizer.learning_rate = cfg.learning_rate_at(step, total_steps);
                let grad_norm = optimizer.step(trainer.model.params_mut(), &grads);
                let mean = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
                let record = StepRecord {
                    step,
                    epoch,
                    video: data[batch[0].video].id.to_string(),
                    anchor: batch[0].anchor,
                    negative: batch[0].negative,
                    window_start: batch[0].start,
                    losses: LossBreakdown {
                        box_loss: mean(|b| b.box_loss),
                        cls: mean(|b| b.cls),
                        textcon: mean(|b| b.textcon),
                        modalcon: mean(|b| b.modalcon),
                        total: mean(|b| b.total),
                    },
                    grad_norm,
                };
                log::debug!(
                    "epoch {epoch} step {step} total {:.5} box {:.5}",
                    record.losses.total,
                    record.losses.box_loss
                );
                if let Some(l) = &mut logs {
                    let line = serde_json::to_string(&record).expect("record serializes");
                    writeln!(l.losses, "{line}").map_err(io_err(Path::new(LOSS_LOG)))?;
                    writeln!(
                        l.timing,
                        "{{\"step\":{step},\"wall_ms\":{}}}",
                        started.elapsed().as_millis()
                    )
                    .map_err(io_err(Path::new(TIMING_LOG)))?;
                }
                history.push(record);
                step += 1;
                if k + 1 == steps_per_epoch {
                    epoch += 1;
                    if let Some(dir) = &opts.out_dir {
                        snapshot(&trainer, &optimizer, epoch, step, &history)
                            .save(&dir.join(epoch_checkpoint(epoch)))?;
                    }
                }
            }
        }
    }

    if let Some(l) = &mut logs {
        l.losses.flush().map_err(io_err(Path::new(LOSS_LOG)))?;
        l.timing.flush().map_err(io_err(Path::new(TIMING_LOG)))?;
    }
    let checkpoint = snapshot(&trainer, &optimizer, epoch, step, &history);
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { checkpoint })
}

/// Rebuilds the model and segmenter stored in a checkpoint.
pub fn restore(ck: &Checkpoint) -> Result<(ProposalModel, FrozenSegmenter)> {
    let (mut model, mut seg) = initialize(&ck.config)?;
    model.load_params(&ck.model)?;
    seg.load_params(&ck.segmenter)?;
    Ok((model, seg))
}
