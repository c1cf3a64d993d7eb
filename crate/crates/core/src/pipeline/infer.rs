//! Online inference: one frame in, one box and mask out.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::geometry::BoundingBox;
use crate::mask::Mask;
use crate::model::{ProposalModel, TextTokens};
use crate::segmenter::{segment_with, SegmentAdapter};
use crate::synthdata::{tokenize, Frame};

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame: usize,
    /// Selected proposal clamped to the unit square.
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub mask: Mask,
}

/// Serializable part of a [`FrameResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub frame: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub mask_pixels: usize,
}

impl FrameResult {
    pub fn summary(&self) -> FrameSummary {
        FrameSummary {
            frame: self.frame,
            bbox: self.bbox,
            confidence: self.confidence,
            mask_pixels: self.mask.count(),
        }
    }
}

/// Where each frame's box prompt comes from.
#[derive(Debug, Clone)]
pub enum BoxSource<'m> {
    /// The trained generator and an encoded sentence.
    Model {
        model: &'m ProposalModel,
        text: TextTokens,
    },
    /// Ground-truth boxes injected in place of proposals, confidence 1.
    GroundTruth(Vec<BoundingBox>),
}

impl<'m> BoxSource<'m> {
    pub fn model(model: &'m ProposalModel, sentence: &str) -> Result<Self> {
        let text = model.encode_text(&tokenize(sentence)?)?;
        Ok(BoxSource::Model { model, text })
    }
}

/// Frame-by-frame inference session. Emitting frame `t` reads only frame `t`;
/// nothing but the output list is carried between frames.
pub struct OnlineSession<'m, 'a> {
    source: BoxSource<'m>,
    adapter: &'a dyn SegmentAdapter,
    outputs: Vec<FrameResult>,
}

impl<'m, 'a> OnlineSession<'m, 'a> {
    pub fn new(source: BoxSource<'m>, adapter: &'a dyn SegmentAdapter) -> Self {
        Self {
            source,
            adapter,
            outputs: Vec::new(),
        }
    }

    pub fn push(&mut self, frame: &Frame) -> Result<&FrameResult> {
        let t = self.outputs.len();
        let (bbox, confidence) = match &self.source {
            BoxSource::Model { model, text } => {
                let out = model.forward_single(frame, text)?;
                let p = out.selected_proposal();
                (p.bbox, p.confidence)
            }
            BoxSource::GroundTruth(boxes) => {
                let b = boxes
                    .get(t)
                    .ok_or(ModelError::LengthMismatch(t + 1, boxes.len()))?;
                (*b, 1.0)
            }
        };
        let bbox = bbox.clamped();
        let mask = segment_with(self.adapter, t, frame, &bbox)?;
        self.outputs.push(FrameResult {
            frame: t,
            bbox,
            confidence,
            mask,
        });
        Ok(self.outputs.last().expect("just pushed"))
    }

    pub fn outputs(&self) -> &[FrameResult] {
        &self.outputs
    }

    pub fn finish(self) -> Vec<FrameResult> {
        self.outputs
    }
}

/// Runs a whole clip through an [`OnlineSession`].
pub fn infer(source: BoxSource<'_>, frames: &[Frame], adapter: &dyn SegmentAdapter) -> Result<Vec<FrameResult>> {
    let mut session = OnlineSession::new(source, adapter);
    for f in frames {
        session.push(f)?;
    }
    Ok(session.finish())
}
