//! On-disk dataset layout.
//!
//! ```text
//! out_dir/
//!   manifest.json
//!   <video id>/frame_000.png            8-bit RGB
//!   <video id>/mask_000_obj0.png        8-bit gray, 0 / 255
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{generate_video, Expression, Frame, GenerationSpec, SceneObject, VideoSample};
use crate::error::DataError;
use crate::geometry::BoundingBox;
use crate::mask::Mask;
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub videos: usize,
    #[serde(flatten)]
    pub video: GenerationSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<String>,
    /// `masks[t][i]` file names.
    pub masks: Vec<Vec<String>>,
    pub expressions: Vec<Expression>,
    /// `boxes[t][i] = [cx, cy, w, h]`.
    pub boxes: Vec<Vec<[f64; 4]>>,
    pub objects: Vec<SceneObject>,
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:03}.png")
}

pub fn mask_file(t: usize, obj: usize) -> String {
    format!("mask_{t:03}_obj{obj}.png")
}

/// Seed of the `index`-th video of a dataset.
pub fn video_seed(dataset_seed: u64, index: usize) -> u64 {
    rng::derive_seed(dataset_seed, &format!("dataset.video.{index}"))
}

/// Generates every sample of a dataset in memory.
pub fn generate_samples(config: &DatasetConfig) -> Result<Vec<VideoSample>, DataError> {
    (0..config.videos)
        .map(|k| {
            let mut v = generate_video(&config.video, video_seed(config.seed, k))?;
            v.id = format!("video_{k:04}");
            Ok(v)
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> DataError + '_ {
    move |source| DataError::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<(), DataError> {
    let img = RgbImage::from_raw(frame.width as u32, frame.height as u32, frame.rgb.clone())
        .expect("frame buffer size");
    img.save(path).map_err(img_err(path))
}

pub fn read_frame(path: &Path) -> Result<Frame, DataError> {
    let img = image::open(path).map_err(img_err(path))?.to_rgb8();
    Ok(Frame {
        width: img.width() as usize,
        height: img.height() as usize,
        rgb: img.into_raw(),
    })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<(), DataError> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.to_bytes())
        .expect("mask buffer size");
    img.save(path).map_err(img_err(path))
}

pub fn read_mask(path: &Path) -> Result<Mask, DataError> {
    let img = image::open(path).map_err(img_err(path))?.to_luma8();
    Ok(Mask::from_bytes(
        img.width() as usize,
        img.height() as usize,
        img.as_raw(),
    ))
}

pub fn write_samples(
    out_dir: &Path,
    config: &DatasetConfig,
    samples: &[VideoSample],
) -> Result<PathBuf, DataError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut entries = Vec::with_capacity(samples.len());
    for v in samples {
        let dir = out_dir.join(&v.id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut frames = Vec::new();
        let mut masks = Vec::new();
        for (t, frame) in v.frames.iter().enumerate() {
            let name = frame_file(t);
            write_frame(&dir.join(&name), frame)?;
            frames.push(name);
            let mut row = Vec::new();
            for (i, m) in v.gt_masks[t].iter().enumerate() {
                let name = mask_file(t, i);
                write_mask(&dir.join(&name), m)?;
                row.push(name);
            }
            masks.push(row);
        }
        entries.push(ManifestEntry {
            id: v.id.clone(),
            t: v.num_frames(),
            m: v.num_objects(),
            width: v.frames[0].width,
            height: v.frames[0].height,
            frames,
            masks,
            expressions: v.expressions.clone(),
            boxes: v
                .gt_boxes
                .iter()
                .map(|row| row.iter().map(|b| b.to_array()).collect())
                .collect(),
            objects: v.objects.clone(),
        });
    }
    let manifest = Manifest {
        config: *config,
        samples: entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Generates a dataset and writes manifest plus assets under `out_dir`.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<PathBuf, DataError> {
    let samples = generate_samples(config)?;
    write_samples(out_dir, config, &samples)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<VideoSample>, DataError> {
    let manifest = read_manifest(dir)?;
    manifest
        .samples
        .iter()
        .map(|entry| load_entry(dir, entry))
        .collect()
}

fn load_entry(dir: &Path, entry: &ManifestEntry) -> Result<VideoSample, DataError> {
    let vdir = dir.join(&entry.id);
    let bad = |reason: String| DataError::Manifest {
        path: dir.join(MANIFEST_FILE),
        reason: format!("{}: {reason}", entry.id),
    };
    if entry.frames.len() != entry.t || entry.boxes.len() != entry.t || entry.masks.len() != entry.t
    {
        return Err(bad("per-frame lists disagree with T".into()));
    }
    if entry.expressions.iter().any(|e| e.object_index >= entry.m) {
        return Err(bad("expression refers to a missing object".into()));
    }
    let frames = entry
        .frames
        .iter()
        .map(|f| read_frame(&vdir.join(f)))
        .collect::<Result<Vec<_>, _>>()?;
    let gt_masks = entry
        .masks
        .iter()
        .map(|row| {
            row.iter()
                .map(|f| read_mask(&vdir.join(f)))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let gt_boxes = entry
        .boxes
        .iter()
        .map(|row| {
            if row.len() != entry.m {
                return Err(bad("box row length differs from M".into()));
            }
            Ok(row.iter().map(|a| BoundingBox::from_array(*a)).collect())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VideoSample {
        id: entry.id.clone(),
        frames,
        objects: entry.objects.clone(),
        expressions: entry.expressions.clone(),
        gt_boxes,
        gt_masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(seed: u64) -> DatasetConfig {
        DatasetConfig {
            videos: 4,
            video: GenerationSpec::default(),
            seed,
        }
    }

    #[test]
    fn manifest_cardinality_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(5);
        generate_dataset(&cfg, dir.path()).unwrap();
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 4);
        assert!(manifest.samples.iter().all(|s| s.expressions.len() >= 2));
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, generate_samples(&cfg).unwrap());
    }

    #[test]
    fn seeds_change_trajectories() {
        let a = generate_samples(&config(1)).unwrap();
        let b = generate_samples(&config(2)).unwrap();
        let boxes = |s: &[VideoSample]| s.iter().map(|v| v.gt_boxes.clone()).collect::<Vec<_>>();
        assert_ne!(boxes(&a), boxes(&b));
    }

    #[test]
    fn missing_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&config(3), dir.path()).unwrap();
        let victim = dir.path().join("video_0001").join(frame_file(2));
        fs::remove_file(&victim).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("frame_002.png"), "{err}");
    }
}
