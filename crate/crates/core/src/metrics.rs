//! Referring-segmentation metrics: region similarity J, contour accuracy F,
//! J&F, precision at IoU thresholds, overall IoU and mean IoU.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DataError, MetricsError};
use crate::mask::Mask;

/// IoU thresholds reported by [`MetricsReport::precision_at`].
pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Boundary match tolerance as a fraction of the image diagonal.
pub const BOUNDARY_TOLERANCE: f64 = 0.008;

fn check_dims(a: &Mask, b: &Mask) -> Result<(), MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::ShapeMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// `(|P ∩ G|, |P ∪ G|)` pixel counts.
pub fn intersection_union(pred: &Mask, gt: &Mask) -> Result<(u64, u64), MetricsError> {
    check_dims(pred, gt)?;
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((inter, union))
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mask IoU. Two empty masks score 1.
pub fn region_j(pred: &Mask, gt: &Mask) -> Result<f64, MetricsError> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(ratio(i, u))
}

/// Foreground pixels with at least one 4-neighbor in the background. Pixels
/// outside the frame count as background.
pub fn boundary(m: &Mask) -> Mask {
    let (w, h) = m.dims();
    Mask::from_fn(w, h, |x, y| {
        if !m.get(x, y) {
            return false;
        }
        x == 0
            || y == 0
            || x + 1 == w
            || y + 1 == h
            || !m.get(x - 1, y)
            || !m.get(x + 1, y)
            || !m.get(x, y - 1)
            || !m.get(x, y + 1)
    })
}

pub fn boundary_radius(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    (BOUNDARY_TOLERANCE * diag).ceil() as usize
}

/// Dilation by a Euclidean disk of radius `r`.
fn dilate(m: &Mask, r: usize) -> Mask {
    let (w, h) = m.dims();
    let ri = r as isize;
    let offsets: Vec<(isize, isize)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= ri * ri)
        .collect();
    let mut out = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            for (dx, dy) in &offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
    }
    out
}

/// Boundary F-measure with a tolerance of `ceil(0.008 * diagonal)` pixels.
pub fn boundary_f(pred: &Mask, gt: &Mask) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (np, ng) = (bp.count(), bg.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let r = boundary_radius(pred.width(), pred.height());
    let (dp, dg) = (dilate(&bp, r), dilate(&bg, r));
    let matched = |b: &Mask, d: &Mask| {
        b.data()
            .iter()
            .zip(d.data())
            .filter(|(&a, &c)| a && c)
            .count()
    };
    let precision = matched(&bp, &dg) as f64 / np as f64;
    let recall = matched(&bg, &dp) as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Share of samples whose IoU is strictly greater than `k`.
pub fn precision_at_k(ious: &[f64], k: f64) -> Result<f64, MetricsError> {
    if ious.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(ious.iter().filter(|&&v| v > k).count() as f64 / ious.len() as f64)
}

/// `(ΣI / ΣU, mean of I/U)`; samples with zero union count as IoU 1.
pub fn overall_and_mean_iou(counts: &[(u64, u64)]) -> (f64, f64) {
    if counts.is_empty() {
        return (0.0, 0.0);
    }
    let (si, su) = counts
        .iter()
        .fold((0u64, 0u64), |(a, b), (i, u)| (a + i, b + u));
    let mean = counts.iter().map(|&(i, u)| ratio(i, u)).sum::<f64>() / counts.len() as f64;
    (ratio(si, su), mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// J and F averaged per expression, then across expressions.
    DavisStyle,
    /// J and F averaged over all annotated (frame, expression) samples.
    A2dStyle,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "davis_style" | "davis" => Ok(Protocol::DavisStyle),
            "a2d_style" | "a2d" => Ok(Protocol::A2dStyle),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

/// Identifies one annotated frame of one referring expression.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub video: String,
    pub expression: usize,
    pub frame: usize,
}

impl std::fmt::Display for SampleKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(video {}, expression {}, frame {})",
            self.video, self.expression, self.frame
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub video: String,
    pub expression: usize,
    pub frame: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionScore {
    pub video: String,
    pub expression: usize,
    pub frames: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    /// Keyed by the threshold written with one decimal, e.g. `"0.5"`.
    pub precision_at: BTreeMap<String, f64>,
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub per_video: Vec<ExpressionScore>,
    #[serde(skip)]
    pub per_frame: Vec<FrameScore>,
    pub notes: Vec<String>,
}

pub const PRECISION_NOTE: &str =
    "P@K counts samples with IoU strictly greater than K; tools using >= can differ at ties";

/// Scores predictions against ground truth. Every ground-truth key needs a
/// prediction; extra predictions are ignored.
pub fn evaluate_dataset(
    predictions: &BTreeMap<SampleKey, Mask>,
    ground_truth: &BTreeMap<SampleKey, Mask>,
    protocol: Protocol,
) -> Result<MetricsReport, MetricsError> {
    if ground_truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut per_frame = Vec::with_capacity(ground_truth.len());
    let mut counts = Vec::with_capacity(ground_truth.len());
    for (key, gt) in ground_truth {
        let pred = predictions
            .get(key)
            .ok_or_else(|| MetricsError::MissingPrediction(key.to_string()))?;
        let (i, u) = intersection_union(pred, gt)?;
        counts.push((i, u));
        per_frame.push(FrameScore {
            video: key.video.clone(),
            expression: key.expression,
            frame: key.frame,
            j: ratio(i, u),
            f: boundary_f(pred, gt)?,
        });
    }

    // BTreeMap order groups frames of one expression together.
    let mut per_video: Vec<ExpressionScore> = Vec::new();
    for s in &per_frame {
        match per_video.last_mut() {
            Some(e) if e.video == s.video && e.expression == s.expression => {
                e.frames += 1;
                e.j += s.j;
                e.f += s.f;
            }
            _ => per_video.push(ExpressionScore {
                video: s.video.clone(),
                expression: s.expression,
                frames: 1,
                j: s.j,
                f: s.f,
            }),
        }
    }
    for e in &mut per_video {
        e.j /= e.frames as f64;
        e.f /= e.frames as f64;
    }

    let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| xs.sum::<f64>() / n as f64;
    let (j_mean, f_mean) = match protocol {
        Protocol::DavisStyle => (
            mean(&mut per_video.iter().map(|e| e.j), per_video.len()),
            mean(&mut per_video.iter().map(|e| e.f), per_video.len()),
        ),
        Protocol::A2dStyle => (
            mean(&mut per_frame.iter().map(|s| s.j), per_frame.len()),
            mean(&mut per_frame.iter().map(|s| s.f), per_frame.len()),
        ),
    };
    let ious: Vec<f64> = per_frame.iter().map(|s| s.j).collect();
    let precision_at = THRESHOLDS
        .iter()
        .map(|&k| Ok((format!("{k:.1}"), precision_at_k(&ious, k)?)))
        .collect::<Result<_, MetricsError>>()?;
    let (overall_iou, mean_iou) = overall_and_mean_iou(&counts);
    Ok(MetricsReport {
        protocol,
        j_mean,
        f_mean,
        jf_mean: (j_mean + f_mean) / 2.0,
        precision_at,
        overall_iou,
        mean_iou,
        per_video,
        per_frame,
        notes: vec![PRECISION_NOTE.to_string()],
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `video,expression,frame,J,F` rows.
    pub fn frame_csv(&self) -> String {
        let mut out = String::from("video,expression,frame,J,F\n");
        for s in &self.per_frame {
            let _ = writeln!(out, "{},{},{},{},{}", s.video, s.expression, s.frame, s.j, s.f);
        }
        out
    }
}

/// File name of a predicted mask inside `<pred_dir>/<video>/`.
pub fn prediction_file(frame: usize, expression: usize) -> String {
    format!("mask_{frame:03}_expr{expression}.png")
}

/// Reads every prediction file for the given keys from a directory laid out
/// as `<dir>/<video>/mask_<frame>_expr<e>.png`. Missing files are skipped so
/// that [`evaluate_dataset`] can report them by key.
pub fn load_prediction_dir<'a>(
    dir: &Path,
    keys: impl Iterator<Item = &'a SampleKey>,
) -> Result<BTreeMap<SampleKey, Mask>, DataError> {
    let mut out = BTreeMap::new();
    for key in keys {
        let path = dir
            .join(&key.video)
            .join(prediction_file(key.frame, key.expression));
        if path.exists() {
            out.insert(key.clone(), crate::synthdata::io::read_mask(&path)?);
        }
    }
    Ok(out)
}
