//! Binary masks.

use crate::geometry::BoundingBox;

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask data length");
        Self {
            width,
            height,
            data,
        }
    }

    /// Binarizes soft values at 0.5.
    pub fn from_soft(width: usize, height: usize, soft: &[f32]) -> Self {
        Self::from_vec(width, height, soft.iter().map(|&v| v >= 0.5).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Tight normalized box around the set pixels, `None` when empty.
    pub fn tight_box(&self) -> Option<BoundingBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| {
            let (w, h) = (self.width as f64, self.height as f64);
            let (l, r) = (x0 as f64 / w, (x1 + 1) as f64 / w);
            let (t, b) = (y0 as f64 / h, (y1 + 1) as f64 / h);
            BoundingBox::raw((l + r) / 2.0, (t + b) / 2.0, r - l, b - t)
        })
    }

    /// 8-bit encoding, 0 = background, 255 = object.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| if v { 255 } else { 0 }).collect()
    }

    /// Decodes 8-bit values, treating anything >= 128 as set.
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self::from_vec(width, height, bytes.iter().map(|&v| v >= 128).collect())
    }

    /// All pixels whose centers fall inside a normalized box.
    pub fn from_box(width: usize, height: usize, b: &BoundingBox) -> Self {
        let c = b.to_corners();
        Self::from_fn(width, height, |x, y| {
            let px = (x as f64 + 0.5) / width as f64;
            let py = (y as f64 + 0.5) / height as f64;
            px >= c.x1 && px < c.x2 && py >= c.y1 && py < c.y2
        })
    }
}
