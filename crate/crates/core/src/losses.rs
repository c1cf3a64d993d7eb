//! Training objective: box regression (L1 + GIoU), the frame-level prompt
//! triplet loss, the video-level feature triplet loss, and their weighted sum.
//!
//! Every loss has a plain value form and a tape form. The value forms are
//! direct formulas and serve as references for the tape forms.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::LossError;
use crate::geometry::{giou_loss_with_grad, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// L1 box regression weight.
    pub lambda_r: f64,
    /// GIoU loss weight.
    pub lambda_g: f64,
    /// Frame-level prompt triplet weight.
    pub lambda_f: f64,
    /// Video-level feature triplet weight.
    pub lambda_v: f64,
    /// Confidence cross-entropy weight.
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r: 5.0,
            lambda_g: 2.0,
            lambda_f: 0.01,
            lambda_v: 0.1,
            lambda_cls: 1.0,
        }
    }
}

fn check_scalar(name: &'static str, value: f64) -> Result<(), LossError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(LossError::InvalidScalar { name, value })
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        check_scalar("lambda_r", self.lambda_r)?;
        check_scalar("lambda_g", self.lambda_g)?;
        check_scalar("lambda_f", self.lambda_f)?;
        check_scalar("lambda_v", self.lambda_v)?;
        check_scalar("lambda_cls", self.lambda_cls)
    }

    /// The same weights with both contrastive terms switched off.
    pub fn box_only(self) -> Self {
        Self {
            lambda_f: 0.0,
            lambda_v: 0.0,
            ..self
        }
    }
}

/// Options shared by both triplet losses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TripletOptions {
    pub margin: f64,
    /// Scale every embedding to unit length before measuring distances.
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletDistances {
    pub d_p: f64,
    pub d_n: f64,
}

impl TripletDistances {
    pub fn new(d_p: f64, d_n: f64) -> Result<Self, LossError> {
        check_scalar("d_p", d_p)?;
        check_scalar("d_n", d_n)?;
        Ok(Self { d_p, d_n })
    }

    pub fn between(anchor: &[f64], pos: &[f64], neg: &[f64], normalize: bool) -> Result<Self, LossError> {
        if anchor.len() != pos.len() {
            return Err(LossError::DimensionMismatch(anchor.len(), pos.len()));
        }
        if anchor.len() != neg.len() {
            return Err(LossError::DimensionMismatch(anchor.len(), neg.len()));
        }
        let prep = |v: &[f64]| if normalize { unit(v) } else { v.to_vec() };
        let (a, p, n) = (prep(anchor), prep(pos), prep(neg));
        Self::new(euclidean(&a, &p), euclidean(&a, &n))
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// `max(0, d_p - d_n)`.
pub fn triplet(d: TripletDistances) -> f64 {
    triplet_with_margin(d, 0.0)
}

pub fn triplet_with_margin(d: TripletDistances, margin: f64) -> f64 {
    (d.d_p - d.d_n + margin).max(0.0)
}

/// Sum over frames of L1 and GIoU terms between selected and ground-truth boxes.
pub fn box_loss(pred: &[BoundingBox], gt: &[BoundingBox], w: &LossWeights) -> Result<f64, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(LossError::Empty);
    }
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let l1: f64 = p
            .to_array()
            .iter()
            .zip(g.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let (giou, _) = giou_loss_with_grad(p, g)?;
        total += w.lambda_r * l1 + w.lambda_g * giou;
    }
    Ok(total)
}

/// Sum over frames of the prompt triplet loss.
pub fn textcon_loss(
    anchor: &[Vec<f64>],
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    opts: TripletOptions,
) -> Result<f64, LossError> {
    if anchor.len() != pos.len() {
        return Err(LossError::LengthMismatch(anchor.len(), pos.len()));
    }
    if anchor.len() != neg.len() {
        return Err(LossError::LengthMismatch(anchor.len(), neg.len()));
    }
    let mut total = 0.0;
    for ((a, p), n) in anchor.iter().zip(pos).zip(neg) {
        let d = TripletDistances::between(a, p, n, opts.normalize)?;
        total += triplet_with_margin(d, opts.margin);
    }
    Ok(total)
}

/// Triplet loss between a video feature and two sentence features.
pub fn modalcon_loss(
    video: &[f64],
    pos: &[f64],
    neg: &[f64],
    opts: TripletOptions,
) -> Result<f64, LossError> {
    let d = TripletDistances::between(video, pos, neg, opts.normalize)?;
    Ok(triplet_with_margin(d, opts.margin))
}

/// Unweighted loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    /// Box loss, already weighted internally by `lambda_r` and `lambda_g`.
    pub box_loss: f64,
    pub cls: f64,
    pub textcon: f64,
    pub modalcon: f64,
}

/// Loss terms with the weighted total. `total` equals
/// `box_loss + lambda_cls * cls + lambda_f * textcon + lambda_v * modalcon`
/// evaluated left to right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_box")]
    pub box_loss: f64,
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_f")]
    pub textcon: f64,
    #[serde(rename = "L_v")]
    pub modalcon: f64,
    pub total: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        box_loss: c.box_loss,
        cls: c.cls,
        textcon: c.textcon,
        modalcon: c.modalcon,
        total: c.box_loss + w.lambda_cls * c.cls + w.lambda_f * c.textcon + w.lambda_v * c.modalcon,
    }
}

// ---- tape forms -----------------------------------------------------------------

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

/// Box loss over frames; `pred[t]` is a `1 x 4` row of `(cx, cy, w, h)`.
pub fn box_loss_on(
    tape: &mut Tape,
    pred: &[Var],
    gt: &[BoundingBox],
    w: &LossWeights,
) -> Result<Var, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(LossError::Empty);
    }
    let mut terms = Vec::with_capacity(pred.len());
    for (&p, g) in pred.iter().zip(gt) {
        let target = tape.row(&g.to_array());
        let diff = tape.sub(p, target);
        let abs = tape.abs(diff);
        let l1 = tape.sum(abs);
        let l1 = tape.scale(l1, w.lambda_r);

        let v = tape.value(p);
        let pb = BoundingBox::raw(v[[0, 0]], v[[0, 1]], v[[0, 2]], v[[0, 3]]);
        let (value, grad) = giou_loss_with_grad(&pb, g)?;
        let local = Mat::from_shape_vec((1, 4), grad.to_vec()).expect("1x4");
        let giou = tape.scalar_fn(p, value, local);
        let giou = tape.scale(giou, w.lambda_g);
        terms.push(tape.add(l1, giou));
    }
    Ok(sum_scalars(tape, &terms))
}

/// Triplet hinge on three embeddings of equal size; the kink gets gradient 0.
pub fn triplet_on(
    tape: &mut Tape,
    anchor: Var,
    pos: Var,
    neg: Var,
    opts: TripletOptions,
) -> Result<Var, LossError> {
    let (sa, sp, sn) = (tape.shape(anchor), tape.shape(pos), tape.shape(neg));
    let numel = |s: (usize, usize)| s.0 * s.1;
    if numel(sa) != numel(sp) {
        return Err(LossError::DimensionMismatch(numel(sa), numel(sp)));
    }
    if numel(sa) != numel(sn) {
        return Err(LossError::DimensionMismatch(numel(sa), numel(sn)));
    }
    let (a, p, n) = if opts.normalize {
        (tape.normalize(anchor), tape.normalize(pos), tape.normalize(neg))
    } else {
        (anchor, pos, neg)
    };
    // Compare as flat vectors regardless of row layout.
    let flat = |tape: &mut Tape, v: Var| {
        let m = tape.value(v);
        if m.nrows() == 1 {
            v
        } else {
            let rows: Vec<Var> = (0..m.nrows()).map(|r| tape.select_rows(v, &[r])).collect();
            tape.concat_cols(&rows)
        }
    };
    let (a, p, n) = (flat(tape, a), flat(tape, p), flat(tape, n));
    let dp = tape.sub(a, p);
    let dp = tape.l2_norm(dp);
    let dn = tape.sub(a, n);
    let dn = tape.l2_norm(dn);
    let diff = tape.sub(dp, dn);
    let diff = if opts.margin != 0.0 {
        let m = tape.constant(Mat::from_elem((1, 1), opts.margin));
        tape.add(diff, m)
    } else {
        diff
    };
    Ok(tape.relu(diff))
}

pub fn textcon_on(
    tape: &mut Tape,
    anchor: &[Var],
    pos: &[Var],
    neg: &[Var],
    opts: TripletOptions,
) -> Result<Var, LossError> {
    if anchor.len() != pos.len() {
        return Err(LossError::LengthMismatch(anchor.len(), pos.len()));
    }
    if anchor.len() != neg.len() {
        return Err(LossError::LengthMismatch(anchor.len(), neg.len()));
    }
    if anchor.is_empty() {
        return Err(LossError::Empty);
    }
    let terms = anchor
        .iter()
        .zip(pos)
        .zip(neg)
        .map(|((&a, &p), &n)| triplet_on(tape, a, p, n, opts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sum_scalars(tape, &terms))
}

pub fn modalcon_on(
    tape: &mut Tape,
    video: Var,
    pos: Var,
    neg: Var,
    opts: TripletOptions,
) -> Result<Var, LossError> {
    triplet_on(tape, video, pos, neg, opts)
}

/// Tape handles of one step's loss terms. Missing terms count as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub box_loss: Var,
    pub cls: Option<Var>,
    pub textcon: Option<Var>,
    pub modalcon: Option<Var>,
}

/// Weighted total on the tape together with the value breakdown.
pub fn total_on(tape: &mut Tape, v: &LossVars, w: &LossWeights) -> (Var, LossBreakdown) {
    let value = |tape: &Tape, x: Option<Var>| x.map_or(0.0, |x| tape.scalar(x));
    let comps = LossComponents {
        box_loss: tape.scalar(v.box_loss),
        cls: value(tape, v.cls),
        textcon: value(tape, v.textcon),
        modalcon: value(tape, v.modalcon),
    };
    let mut total = v.box_loss;
    for (term, weight) in [
        (v.cls, w.lambda_cls),
        (v.textcon, w.lambda_f),
        (v.modalcon, w.lambda_v),
    ] {
        if let Some(t) = term {
            let s = tape.scale(t, weight);
            total = tape.add(total, s);
        }
    }
    let mut breakdown = total_loss(&comps, w);
    breakdown.total = tape.scalar(total);
    (total, breakdown)
}
