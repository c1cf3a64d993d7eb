//! Browser demo: generate a synthetic clip, compare a drawn box with the
//! ground truth, and prompt a segmenter with it.
//!
//! Every export takes and returns plain numbers, byte buffers or JSON
//! strings, so the same functions run natively in tests.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use rvos::geometry::{generalized_iou_raw, iou_raw, BoundingBox};
use rvos::losses::{box_loss, LossWeights};
use rvos::mask::Mask;
use rvos::metrics::{boundary_f, region_j};
use rvos::segmenter::{build_adapter, segment_with};
use rvos::synthdata::{generate_video, GenerationSpec, VideoSample};

/// Box comparison shown next to the canvas.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BoxReport {
    pub iou: f64,
    pub giou: f64,
    pub giou_loss: f64,
    pub l1: f64,
    /// Single-frame box loss with the default weights.
    pub box_loss: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SegmentReport {
    pub j: f64,
    pub f: f64,
    pub pixels: usize,
}

fn to_box(b: &[f64]) -> Result<BoundingBox, JsError> {
    if b.len() != 4 {
        return Err(JsError::new("a box has four numbers: cx, cy, w, h"));
    }
    Ok(BoundingBox::raw(b[0], b[1], b[2], b[3]))
}

/// IoU, GIoU and the box loss of `pred` against `gt`, as JSON.
#[wasm_bindgen]
pub fn compare_boxes(pred: &[f64], gt: &[f64]) -> Result<String, JsError> {
    let (p, g) = (to_box(pred)?, to_box(gt)?);
    p.validate().map_err(|e| JsError::new(&e.to_string()))?;
    g.validate().map_err(|e| JsError::new(&e.to_string()))?;
    let giou = generalized_iou_raw(&p, &g).map_err(|e| JsError::new(&e.to_string()))?;
    let l1 = pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum();
    let loss = box_loss(&[p], &[g], &LossWeights::default()).map_err(|e| JsError::new(&e.to_string()))?;
    let r = BoxReport {
        iou: iou_raw(&p, &g),
        giou,
        giou_loss: 1.0 - giou,
        l1,
        box_loss: loss,
    };
    Ok(serde_json::to_string(&r).expect("report serializes"))
}

/// One generated clip held by the page.
#[wasm_bindgen]
pub struct Clip {
    sample: VideoSample,
}

#[wasm_bindgen]
impl Clip {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, frames: usize, objects: usize, motion_only_pairs: bool) -> Result<Clip, JsError> {
        let spec = GenerationSpec {
            frames,
            objects,
            motion_only_pairs,
            ..GenerationSpec::default()
        };
        let sample = generate_video(&spec, seed).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Clip { sample })
    }

    pub fn size(&self) -> usize {
        self.sample.frames[0].width
    }

    pub fn num_frames(&self) -> usize {
        self.sample.num_frames()
    }

    /// Referring sentences, as a JSON array of strings.
    pub fn sentences(&self) -> String {
        let s: Vec<&str> = self.sample.expressions.iter().map(|e| e.text.as_str()).collect();
        serde_json::to_string(&s).expect("strings serialize")
    }

    /// Frame `t` as RGBA bytes for an `ImageData`.
    pub fn frame_rgba(&self, t: usize) -> Result<Vec<u8>, JsError> {
        let f = self.sample.frames.get(t).ok_or_else(|| JsError::new("frame out of range"))?;
        Ok(f.rgb.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
    }

    /// Ground-truth box `[cx, cy, w, h]` of expression `e` at frame `t`.
    pub fn gt_box(&self, t: usize, e: usize) -> Result<Vec<f64>, JsError> {
        self.check(t, e)?;
        Ok(self.sample.boxes_for_expression(e)[t].to_array().to_vec())
    }

    /// Segments frame `t` with `prompt` and scores the mask against
    /// expression `e`. Returns the JSON report; the mask itself comes from
    /// [`Clip::mask_rgba`].
    pub fn segment(&self, t: usize, e: usize, prompt: &[f64], adapter: &str) -> Result<String, JsError> {
        let (mask, gt) = self.run_segment(t, e, prompt, adapter)?;
        let err = |e: rvos::error::MetricsError| JsError::new(&e.to_string());
        let r = SegmentReport {
            j: region_j(&mask, gt).map_err(err)?,
            f: boundary_f(&mask, gt).map_err(err)?,
            pixels: mask.count(),
        };
        Ok(serde_json::to_string(&r).expect("report serializes"))
    }

    /// Translucent overlay of the predicted mask, RGBA.
    pub fn mask_rgba(&self, t: usize, e: usize, prompt: &[f64], adapter: &str) -> Result<Vec<u8>, JsError> {
        let (mask, _) = self.run_segment(t, e, prompt, adapter)?;
        Ok(mask
            .data()
            .iter()
            .flat_map(|&on| if on { [255, 0, 255, 140] } else { [0, 0, 0, 0] })
            .collect())
    }
}

impl Clip {
    fn check(&self, t: usize, e: usize) -> Result<(), JsError> {
        if t >= self.sample.num_frames() || e >= self.sample.expressions.len() {
            return Err(JsError::new("frame or expression out of range"));
        }
        Ok(())
    }

    fn run_segment(&self, t: usize, e: usize, prompt: &[f64], adapter: &str) -> Result<(Mask, &Mask), JsError> {
        self.check(t, e)?;
        let prompt = to_box(prompt)?.clamped();
        let adapter = build_adapter(adapter, Some(&self.sample)).map_err(|e| JsError::new(&e.to_string()))?;
        let mask = segment_with(adapter.as_ref(), t, &self.sample.frames[t], &prompt)
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok((mask, self.sample.masks_for_expression(e)[t]))
    }
}
