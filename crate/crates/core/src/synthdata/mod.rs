//! Synthetic referring-video data: moving colored shapes, templated motion
//! sentences, per-frame boxes and masks.
//!
//! Masks are part of [`VideoSample`] for evaluation only. Training code sees a
//! [`WeakSample`], which carries frames, boxes and sentences and nothing else.

pub mod io;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::geometry::BoundingBox;
use crate::mask::Mask;
use crate::rng;

pub use vocab::tokenize;

const MAX_ATTEMPTS: usize = 200;
const BACKGROUND: [u8; 3] = [24, 24, 28];
/// Minimum share of an object's pixels that must stay visible in every frame.
const MIN_VISIBLE: f64 = 0.55;
const EDGE_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    TowardTopRight,
    TowardBottomLeft,
    Still,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [230, 210, 40],
        }
    }
}

impl SizeClass {
    /// Half of the object's extent, as a fraction of the frame side.
    pub fn half_extent(self) -> f64 {
        match self {
            SizeClass::Small => 0.09,
            SizeClass::Large => 0.14,
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 7] = [
        Motion::Left,
        Motion::Right,
        Motion::Up,
        Motion::Down,
        Motion::TowardTopRight,
        Motion::TowardBottomLeft,
        Motion::Still,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Motion::Left => "moving left",
            Motion::Right => "moving right",
            Motion::Up => "moving up",
            Motion::Down => "moving down",
            Motion::TowardTopRight => "moving toward the top right",
            Motion::TowardBottomLeft => "moving toward the bottom left",
            Motion::Still => "staying still",
        }
    }

    /// Unit direction in image coordinates (y grows downward).
    pub fn direction(self) -> (f64, f64) {
        let d = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            Motion::Left => (-1.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Up => (0.0, -1.0),
            Motion::Down => (0.0, 1.0),
            Motion::TowardTopRight => (d, -d),
            Motion::TowardBottomLeft => (-d, d),
            Motion::Still => (0.0, 0.0),
        }
    }
}

/// Straight-line path: `center(t) = start + t * velocity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: [f64; 2],
    pub velocity: [f64; 2],
}

impl Trajectory {
    pub fn center(&self, t: usize) -> (f64, f64) {
        (
            self.start[0] + t as f64 * self.velocity[0],
            self.start[1] + t as f64 * self.velocity[1],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size_class: SizeClass,
    pub trajectory: Trajectory,
}

impl SceneObject {
    /// Whether the pixel center `(px, py)` (normalized) lies in the object at
    /// frame `t`, ignoring occlusion.
    pub fn covers(&self, t: usize, px: f64, py: f64) -> bool {
        let (cx, cy) = self.trajectory.center(t);
        let r = self.size_class.half_extent();
        let (dx, dy) = (px - cx, py - cy);
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // Upward-pointing isosceles triangle inscribed in the 2r x 2r square.
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub text: String,
    pub object_index: usize,
    pub motion_word: Motion,
}

/// One 8-bit RGB frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            rgb: color.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub frames: Vec<Frame>,
    pub objects: Vec<SceneObject>,
    pub expressions: Vec<Expression>,
    /// `gt_boxes[t][i]` for frame `t` and object `i`.
    pub gt_boxes: Vec<Vec<BoundingBox>>,
    /// `gt_masks[t][i]`, visible pixels of object `i` at frame `t`.
    pub gt_masks: Vec<Vec<Mask>>,
}

/// The box-supervised view of a sample handed to training code.
#[derive(Debug, Clone, Copy)]
pub struct WeakSample<'a> {
    pub id: &'a str,
    pub frames: &'a [Frame],
    pub expressions: &'a [Expression],
    pub gt_boxes: &'a [Vec<BoundingBox>],
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn weak(&self) -> WeakSample<'_> {
        WeakSample {
            id: &self.id,
            frames: &self.frames,
            expressions: &self.expressions,
            gt_boxes: &self.gt_boxes,
        }
    }

    /// Box track of the object referred to by expression `e`.
    pub fn boxes_for_expression(&self, e: usize) -> Vec<BoundingBox> {
        let obj = self.expressions[e].object_index;
        self.gt_boxes.iter().map(|row| row[obj]).collect()
    }

    pub fn masks_for_expression(&self, e: usize) -> Vec<&Mask> {
        let obj = self.expressions[e].object_index;
        self.gt_masks.iter().map(|row| &row[obj]).collect()
    }
}

impl WeakSample<'_> {
    pub fn boxes_for_expression(&self, e: usize) -> Vec<BoundingBox> {
        let obj = self.expressions[e].object_index;
        self.gt_boxes.iter().map(|row| row[obj]).collect()
    }
}

/// Parameters of one synthetic video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub frames: usize,
    pub objects: usize,
    /// Frame side in pixels (frames are square).
    pub size: usize,
    /// Objects come in pairs of identical appearance that differ only in motion.
    #[serde(default)]
    pub motion_only_pairs: bool,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            objects: 2,
            size: 64,
            motion_only_pairs: false,
        }
    }
}

impl GenerationSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(4..=32).contains(&self.frames) {
            return Err(DataError::InvalidSpec(format!(
                "frames = {} outside [4, 32]",
                self.frames
            )));
        }
        if !(2..=4).contains(&self.objects) {
            return Err(DataError::InvalidSpec(format!(
                "objects = {} outside [2, 4]",
                self.objects
            )));
        }
        if self.size != 64 && self.size != 128 {
            return Err(DataError::InvalidSpec(format!(
                "size = {} not in {{64, 128}}",
                self.size
            )));
        }
        Ok(())
    }
}

pub fn sentence_for(obj: &SceneObject, motion: Motion) -> String {
    format!("the {} {} {}", obj.color.word(), obj.shape.word(), motion.phrase())
}

fn pick_appearances(
    spec: &GenerationSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<(Shape, Color, SizeClass)> {
    let mut combos: Vec<(Shape, Color)> = Shape::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
        .collect();
    combos.shuffle(rng);
    let size = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            SizeClass::Small
        } else {
            SizeClass::Large
        }
    };
    let mut out = Vec::with_capacity(spec.objects);
    let mut next = combos.into_iter();
    while out.len() < spec.objects {
        let (s, c) = next.next().expect("12 appearance combinations");
        let sz = size(rng);
        out.push((s, c, sz));
        if spec.motion_only_pairs && out.len() < spec.objects {
            out.push((s, c, sz));
        }
    }
    out
}

fn pick_motions(spec: &GenerationSpec, rng: &mut ChaCha8Rng) -> Vec<Motion> {
    if spec.motion_only_pairs {
        // Twin objects need distinct motion words; distinct words for all is
        // the simplest way to get that.
        let mut all = Motion::ALL.to_vec();
        all.shuffle(rng);
        all.truncate(spec.objects);
        all
    } else {
        (0..spec.objects)
            .map(|_| Motion::ALL[rng.random_range(0..Motion::ALL.len())])
            .collect()
    }
}

fn sample_trajectory(
    motion: Motion,
    half: f64,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Trajectory> {
    let (dx, dy) = motion.direction();
    let travel = rng.random_range(0.25..0.4);
    let steps = (frames - 1) as f64;
    let velocity = [dx * travel / steps, dy * travel / steps];
    let lo = half + EDGE_MARGIN;
    let hi = 1.0 - half - EDGE_MARGIN;
    let mut start = [0.0; 2];
    for axis in 0..2 {
        let total = velocity[axis] * steps;
        let s_lo = lo - total.min(0.0);
        let s_hi = hi - total.max(0.0);
        if s_lo >= s_hi {
            return None;
        }
        start[axis] = rng.random_range(s_lo..s_hi);
    }
    Some(Trajectory { start, velocity })
}

/// Full (unoccluded) and visible masks for every object in frame `t`.
fn render_masks(objects: &[SceneObject], t: usize, size: usize) -> (Vec<Mask>, Vec<Mask>) {
    let full: Vec<Mask> = objects
        .iter()
        .map(|o| {
            Mask::from_fn(size, size, |x, y| {
                o.covers(t, (x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64)
            })
        })
        .collect();
    // Higher object index is drawn on top.
    let mut visible = full.clone();
    for i in 0..objects.len() {
        for j in i + 1..objects.len() {
            for y in 0..size {
                for x in 0..size {
                    if full[j].get(x, y) {
                        visible[i].set(x, y, false);
                    }
                }
            }
        }
    }
    (full, visible)
}

fn render_frame(objects: &[SceneObject], visible: &[Mask], size: usize) -> Frame {
    let mut frame = Frame::filled(size, size, BACKGROUND);
    for (obj, mask) in objects.iter().zip(visible) {
        for y in 0..size {
            for x in 0..size {
                if mask.get(x, y) {
                    frame.put(x, y, obj.color.rgb());
                }
            }
        }
    }
    frame
}

/// Deterministically generates one video from `(spec, seed)`.
pub fn generate_video(spec: &GenerationSpec, seed: u64) -> Result<VideoSample, DataError> {
    spec.validate()?;
    let mut rng = rng::stream(seed, "synthdata.video");
    for _ in 0..MAX_ATTEMPTS {
        if let Some(sample) = try_generate(spec, seed, &mut rng) {
            return Ok(sample);
        }
    }
    Err(DataError::Infeasible(MAX_ATTEMPTS))
}

fn try_generate(spec: &GenerationSpec, seed: u64, rng: &mut ChaCha8Rng) -> Option<VideoSample> {
    let appearances = pick_appearances(spec, rng);
    let motions = pick_motions(spec, rng);
    let mut objects = Vec::with_capacity(spec.objects);
    for (&(shape, color, size_class), &motion) in appearances.iter().zip(&motions) {
        let trajectory = sample_trajectory(motion, size_class.half_extent(), spec.frames, rng)?;
        objects.push(SceneObject {
            shape,
            color,
            size_class,
            trajectory,
        });
    }

    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt_boxes = Vec::with_capacity(spec.frames);
    let mut gt_masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let (full, visible) = render_masks(&objects, t, spec.size);
        let mut boxes = Vec::with_capacity(objects.len());
        for (f, v) in full.iter().zip(&visible) {
            let total = f.count();
            if total == 0 || (v.count() as f64) < MIN_VISIBLE * total as f64 {
                return None;
            }
            boxes.push(v.tight_box()?);
        }
        frames.push(render_frame(&objects, &visible, spec.size));
        gt_boxes.push(boxes);
        gt_masks.push(visible);
    }

    let expressions = objects
        .iter()
        .zip(&motions)
        .enumerate()
        .map(|(i, (o, &m))| Expression {
            text: sentence_for(o, m),
            object_index: i,
            motion_word: m,
        })
        .collect();

    Some(VideoSample {
        id: format!("video_{seed:016x}"),
        frames,
        objects,
        expressions,
        gt_boxes,
        gt_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec() -> GenerationSpec {
        GenerationSpec::default()
    }

    #[test]
    fn determinism() {
        let a = generate_video(&spec(), 0).unwrap();
        let b = generate_video(&spec(), 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.gt_boxes, generate_video(&spec(), 1).unwrap().gt_boxes);
    }

    #[test]
    fn boxes_are_tight_boxes_of_masks() {
        for seed in 0..20 {
            let v = generate_video(&spec(), seed).unwrap();
            for (boxes, masks) in v.gt_boxes.iter().zip(&v.gt_masks) {
                for (b, m) in boxes.iter().zip(masks) {
                    assert_eq!(Some(*b), m.tight_box());
                    b.validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn motion_words_match_trajectories() {
        let mut seen_right = false;
        for seed in 0..40 {
            let v = generate_video(&spec(), seed).unwrap();
            let last = v.num_frames() - 1;
            for e in &v.expressions {
                let first = v.gt_boxes[0][e.object_index];
                let end = v.gt_boxes[last][e.object_index];
                let (dx, dy) = (end.cx - first.cx, end.cy - first.cy);
                match e.motion_word {
                    Motion::Right => {
                        seen_right = true;
                        assert!(dx > 0.0);
                    }
                    Motion::Left => assert!(dx < 0.0),
                    Motion::Up => assert!(dy < 0.0),
                    Motion::Down => assert!(dy > 0.0),
                    Motion::TowardTopRight => assert!(dx > 0.0 && dy < 0.0),
                    Motion::TowardBottomLeft => assert!(dx < 0.0 && dy > 0.0),
                    Motion::Still => {}
                }
            }
        }
        assert!(seen_right);
    }

    #[test]
    fn expressions_are_distinct_and_tokenizable() {
        for seed in 0..30 {
            for objects in 2..=4 {
                let s = GenerationSpec { objects, ..spec() };
                let v = generate_video(&s, seed).unwrap();
                let texts: HashSet<_> = v.expressions.iter().map(|e| e.text.clone()).collect();
                assert_eq!(texts.len(), objects);
                let pairs: HashSet<_> = v.objects.iter().map(|o| (o.shape, o.color)).collect();
                assert_eq!(pairs.len(), objects);
                for e in &v.expressions {
                    tokenize(&e.text).unwrap();
                }
            }
        }
    }

    #[test]
    fn motion_only_pairs_share_appearance() {
        let s = GenerationSpec {
            motion_only_pairs: true,
            ..spec()
        };
        for seed in 0..10 {
            let v = generate_video(&s, seed).unwrap();
            assert_eq!(v.objects[0].shape, v.objects[1].shape);
            assert_eq!(v.objects[0].color, v.objects[1].color);
            assert_ne!(v.expressions[0].motion_word, v.expressions[1].motion_word);
            assert_ne!(v.expressions[0].text, v.expressions[1].text);
        }
    }

    #[test]
    fn frames_show_object_colors_on_masks() {
        let v = generate_video(&spec(), 3).unwrap();
        for (frame, masks) in v.frames.iter().zip(&v.gt_masks) {
            for (obj, m) in v.objects.iter().zip(masks) {
                for y in 0..m.height() {
                    for x in 0..m.width() {
                        if m.get(x, y) {
                            assert_eq!(frame.pixel(x, y), obj.color.rgb());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_out_of_range_specs() {
        for bad in [
            GenerationSpec { frames: 3, ..spec() },
            GenerationSpec { frames: 33, ..spec() },
            GenerationSpec { objects: 1, ..spec() },
            GenerationSpec { objects: 5, ..spec() },
            GenerationSpec { size: 96, ..spec() },
        ] {
            assert!(matches!(generate_video(&bad, 0), Err(DataError::InvalidSpec(_))));
        }
    }

    #[test]
    fn larger_configurations_generate() {
        let s = GenerationSpec {
            frames: 32,
            objects: 4,
            size: 128,
            motion_only_pairs: false,
        };
        let v = generate_video(&s, 11).unwrap();
        assert_eq!(v.frames.len(), 32);
        assert_eq!(v.frames[0].rgb.len(), 128 * 128 * 3);
    }
}
