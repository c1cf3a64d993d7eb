//! Dataset evaluation and the loss ablation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou_raw;
use crate::metrics::{evaluate_dataset, MetricsReport, Protocol, SampleKey};
use crate::model::ProposalModel;
use crate::segmenter::build_adapter;
use crate::synthdata::VideoSample;

use super::config::{Arm, RunConfig};
use super::infer::{infer, BoxSource};
use super::train::{train, TrainOptions};

/// What produces the box prompts during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Proposer<'m> {
    Model(&'m ProposalModel),
    /// Ground-truth boxes, the upper bound on box quality.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionBoxIou {
    pub video: String,
    pub expression: usize,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxReport {
    /// Mean IoU of selected, clamped boxes against ground truth over all
    /// (frame, expression) samples.
    pub mean_iou: f64,
    /// `100 * mean_iou`.
    pub score: f64,
    pub per_expression: Vec<ExpressionBoxIou>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub boxes: BoxReport,
}

/// Runs online inference for every (video, expression) pair and scores masks
/// and boxes.
pub fn evaluate(
    proposer: Proposer<'_>,
    samples: &[VideoSample],
    protocol: Protocol,
    adapter: &str,
) -> Result<Evaluation> {
    let mut predictions = BTreeMap::new();
    let mut ground_truth = BTreeMap::new();
    let mut per_expression = Vec::new();
    let mut all_ious = Vec::new();
    for sample in samples {
        let adapter = build_adapter(adapter, Some(sample))?;
        for (e, expr) in sample.expressions.iter().enumerate() {
            let gt_boxes = sample.boxes_for_expression(e);
            let source = match proposer {
                Proposer::Model(m) => BoxSource::model(m, &expr.text)?,
                Proposer::GroundTruth => BoxSource::GroundTruth(gt_boxes.clone()),
            };
            let results = infer(source, &sample.frames, adapter.as_ref())?;
            let gt_masks = sample.masks_for_expression(e);
            let mut ious = Vec::with_capacity(results.len());
            for (r, (gb, gm)) in results.into_iter().zip(gt_boxes.iter().zip(gt_masks)) {
                ious.push(iou_raw(&r.bbox, gb));
                let key = SampleKey {
                    video: sample.id.clone(),
                    expression: e,
                    frame: r.frame,
                };
                ground_truth.insert(key.clone(), gm.clone());
                predictions.insert(key, r.mask);
            }
            per_expression.push(ExpressionBoxIou {
                video: sample.id.clone(),
                expression: e,
                mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
            });
            all_ious.extend(ious);
        }
    }
    let metrics = evaluate_dataset(&predictions, &ground_truth, protocol)?;
    let mean_iou = if all_ious.is_empty() {
        0.0
    } else {
        all_ious.iter().sum::<f64>() / all_ious.len() as f64
    };
    Ok(Evaluation {
        metrics,
        boxes: BoxReport {
            mean_iou,
            score: 100.0 * mean_iou,
            per_expression,
        },
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const BOX_REPORT_FILE: &str = "box_report.json";
pub const FRAME_CSV: &str = "per_frame.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the metrics report, the box report and the per-frame CSV.
pub fn write_evaluation(ev: &Evaluation, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write(&dir.join(REPORT_FILE), &ev.metrics.to_json())?;
    write(
        &dir.join(BOX_REPORT_FILE),
        &serde_json::to_string_pretty(&ev.boxes).expect("box report serializes"),
    )?;
    write(&dir.join(FRAME_CSV), &ev.metrics.frame_csv())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    /// Box score, `100 * mean box IoU`.
    #[serde(rename = "Box")]
    pub box_score: f64,
    #[serde(rename = "J&F")]
    pub jf: f64,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
}

impl AblationRow {
    fn from_eval(arm: &str, ev: &Evaluation) -> Self {
        Self {
            arm: arm.to_string(),
            box_score: ev.boxes.score,
            jf: ev.metrics.jf_mean,
            j: ev.metrics.j_mean,
            f: ev.metrics.f_mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ROW_BASELINE: &str = "grounding_only";
pub const ROW_BOX_ONLY: &str = "box_only";
pub const ROW_CONTRA: &str = "box_plus_contra";
pub const ROW_UPPER_BOUND: &str = "gt_box_upper_bound";

impl AblationTable {
    pub fn row(&self, arm: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| arm | Box | J&F | J | F |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.1} | {:.3} | {:.3} | {:.3} |\n",
                r.arm, r.box_score, r.jf, r.j, r.f
            ));
        }
        out
    }
}

/// Trains the box-only and full-objective arms from the same initialization,
/// then evaluates them next to the untrained generator and ground-truth boxes.
/// Rows come out as baseline, box only, box plus triplet losses, upper bound.
pub fn ablate(
    cfg: &RunConfig,
    train_set: &[VideoSample],
    eval_set: &[VideoSample],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let protocol = Protocol::DavisStyle;
    let weak: Vec<_> = train_set.iter().map(|s| s.weak()).collect();
    let mut rows = Vec::with_capacity(4);
    for (arm, label) in [
        (Arm::GroundingOnly, ROW_BASELINE),
        (Arm::BoxOnly, ROW_BOX_ONLY),
        (Arm::BoxPlusContra, ROW_CONTRA),
    ] {
        let arm_cfg = RunConfig {
            arm,
            ..cfg.clone()
        };
        let opts = TrainOptions {
            out_dir: out_dir.map(|d| d.join(label)),
            ..TrainOptions::default()
        };
        let outcome = train(&arm_cfg, &weak, opts)?;
        let (model, _) = super::train::restore(&outcome.checkpoint)?;
        let ev = evaluate(Proposer::Model(&model), eval_set, protocol, &cfg.adapter)?;
        if let Some(d) = out_dir {
            write_evaluation(&ev, &d.join(label))?;
        }
        log::info!("{label}: box {:.2} J&F {:.3}", ev.boxes.score, ev.metrics.jf_mean);
        rows.push(AblationRow::from_eval(label, &ev));
    }
    let ev = evaluate(Proposer::GroundTruth, eval_set, protocol, &cfg.adapter)?;
    rows.push(AblationRow::from_eval(ROW_UPPER_BOUND, &ev));
    let table = AblationTable { rows };
    if let Some(d) = out_dir {
        write(
            &d.join("ablation.json"),
            &serde_json::to_string_pretty(&table).expect("table serializes"),
        )?;
        write(&d.join("ablation.md"), &table.to_markdown())?;
    }
    Ok(table)
}
