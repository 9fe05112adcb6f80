//! Egg segmentation against the dark candling background.
//!
//! Luminance is thresholded (Otsu by default), the largest 8-connected bright
//! component is kept together with any enclosed holes (the darker embryo and
//! vessels), a thin rim is kept for the anti-aliased shell edge, and the
//! image is cropped to the component's bounding box plus a margin. Pixels
//! outside the egg are zeroed and the crop is resized to the target size.

use std::collections::VecDeque;

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// Rim kept around the thresholded component, as a fraction of the longer
/// side (at least two pixels).
const RIM_FRACTION: f64 = 0.02;
/// A crop box within this fraction of the frame (plus two pixels) on every
/// side is treated as the whole frame, so an already cropped egg passes
/// through unchanged.
const SNAP_FRACTION: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    Otsu,
    Fixed(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessPolicy {
    pub threshold: ThresholdMethod,
    pub crop_margin_fraction: f64,
    /// `(height, width)` in pixels.
    pub target_size: (u32, u32),
}

impl PreprocessPolicy {
    pub fn new(target_size: (u32, u32)) -> Self {
        Self { threshold: ThresholdMethod::Otsu, crop_margin_fraction: 0.05, target_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(DataError::InvalidParameter("target size must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.crop_margin_fraction) {
            return Err(DataError::InvalidParameter(format!(
                "crop margin {} outside [0, 0.5]",
                self.crop_margin_fraction
            )));
        }
        Ok(())
    }
}

fn luminance(img: &RgbImage) -> Vec<u8> {
    img.pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().min(255.0) as u8
        })
        .collect()
}

/// Otsu's threshold over a 256-bin histogram: the level `t` maximising the
/// between-class variance of `{<= t}` and `{> t}`. The first maximiser wins.
pub fn otsu_threshold(levels: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in levels {
        hist[v as usize] += 1;
    }
    let total = levels.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (0u8, -1.0);
    for t in 0..256 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            if best.1 < 0.0 {
                best = (t as u8, 0.0);
            }
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.1 {
            best = (t as u8, between);
        }
    }
    best.0
}

/// Labels of the largest 8-connected `true` component (first in scan order on ties).
fn largest_component(mask: &[bool], w: usize, h: usize) -> Option<Vec<bool>> {
    let mut label = vec![u32::MAX; mask.len()];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != u32::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask[j] && label[j] == u32::MAX {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    best.map(|(id, _)| label.iter().map(|&l| l == id).collect())
}

/// Adds enclosed holes: everything not reachable from the border through
/// non-component pixels (4-connected).
fn fill_holes(component: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut outside = vec![false; component.len()];
    let mut queue = VecDeque::new();
    let seed = |i: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        if !component[i] && !outside[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    };
    for x in 0..w {
        seed(x, &mut outside, &mut queue);
        seed((h - 1) * w + x, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(y * w, &mut outside, &mut queue);
        seed(y * w + w - 1, &mut outside, &mut queue);
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let mut push = |j: usize| {
            if !component[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < w {
            push(i + 1);
        }
        if y > 0 {
            push(i - w);
        }
        if y + 1 < h {
            push(i + w);
        }
    }
    outside.iter().map(|&o| !o).collect()
}

fn dilate(mask: &[bool], w: usize, h: usize, r: i64) -> Vec<bool> {
    let mut out = mask.to_vec();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !mask[(y as usize) * w + x as usize] {
                continue;
            }
            for ny in (y - r).max(0)..=(y + r).min(h as i64 - 1) {
                for nx in (x - r).max(0)..=(x + r).min(w as i64 - 1) {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BoundingBox {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

fn bounding_box(mask: &[bool], w: usize) -> BoundingBox {
    let mut b = BoundingBox { x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0 };
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % w, i / w);
        b.x0 = b.x0.min(x);
        b.y0 = b.y0.min(y);
        b.x1 = b.x1.max(x);
        b.y1 = b.y1.max(y);
    }
    b
}

/// Crops the image to its egg and resizes it to `policy.target_size`.
pub fn preprocess(image: &RgbImage, policy: &PreprocessPolicy) -> Result<RgbImage> {
    policy.validate()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(DataError::InvalidParameter("empty image".into()));
    }
    let lum = luminance(image);
    let t = match policy.threshold {
        ThresholdMethod::Otsu => otsu_threshold(&lum),
        ThresholdMethod::Fixed(t) => t,
    };
    let fg: Vec<bool> = lum.iter().map(|&v| v > t).collect();
    let component = largest_component(&fg, w, h).ok_or(DataError::NoEggFound)?;
    let bbox = bounding_box(&component, w);
    let rim = ((RIM_FRACTION * w.max(h) as f64).ceil() as i64).max(2);
    let egg = dilate(&fill_holes(&component, w, h), w, h, rim);

    let bw = (bbox.x1 - bbox.x0 + 1) as i64;
    let bh = (bbox.y1 - bbox.y0 + 1) as i64;
    let mx = (policy.crop_margin_fraction * bw as f64).ceil() as i64;
    let my = (policy.crop_margin_fraction * bh as f64).ceil() as i64;
    let mut x0 = bbox.x0 as i64 - mx;
    let mut y0 = bbox.y0 as i64 - my;
    let mut x1 = bbox.x1 as i64 + mx;
    let mut y1 = bbox.y1 as i64 + my;
    let snap_x = (SNAP_FRACTION * w as f64).ceil() as i64 + 2;
    let snap_y = (SNAP_FRACTION * h as f64).ceil() as i64 + 2;
    let (wi, hi) = (w as i64, h as i64);
    if x0.abs() <= snap_x && (x1 - (wi - 1)).abs() <= snap_x && y0.abs() <= snap_y && (y1 - (hi - 1)).abs() <= snap_y {
        (x0, y0, x1, y1) = (0, 0, wi - 1, hi - 1);
    }

    // crop boxes reaching past the border are padded with background
    let (cw, ch) = ((x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32);
    let crop = RgbImage::from_fn(cw, ch, |cx, cy| {
        let (sx, sy) = (x0 + cx as i64, y0 + cy as i64);
        if sx < 0 || sy < 0 || sx >= wi || sy >= hi || !egg[sy as usize * w + sx as usize] {
            image::Rgb([0, 0, 0])
        } else {
            *image.get_pixel(sx as u32, sy as u32)
        }
    });
    Ok(resize_to(&crop, policy.target_size))
}

/// Resize-only path used when an image is already segmented.
pub(crate) fn resize_to(image: &RgbImage, target: (u32, u32)) -> RgbImage {
    let (th, tw) = target;
    if image.dimensions() == (tw, th) {
        return image.clone();
    }
    imageops::resize(image, tw, th, FilterType::Triangle)
}
