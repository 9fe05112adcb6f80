//! Geometric augmentation of preprocessed egg images.
//!
//! All warps use inverse mapping about the image centre `((W-1)/2, (H-1)/2)`
//! with bilinear resampling; samples falling outside the source take the
//! fill value. Every transform short-circuits on its identity parameters so
//! identities hold bit-exactly.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipAxis {
    /// Mirror left-right: column `c` goes to `W-1-c`.
    Horizontal,
    /// Mirror top-bottom: row `r` goes to `H-1-r`.
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub rotation_range_deg: (f64, f64),
    /// Random left-right mirroring.
    pub x_reflection: bool,
    /// Random top-bottom mirroring.
    pub y_reflection: bool,
    /// Shared by the x and y shear angles.
    pub shear_range_deg: (f64, f64),
    pub scale_range: (f64, f64),
    /// Shared by the x and y shifts, as a fraction of the respective side.
    pub translation_range_frac: (f64, f64),
    pub fill_value: u8,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            rotation_range_deg: (-5.0, 5.0),
            x_reflection: true,
            y_reflection: true,
            shear_range_deg: (-5.0, 5.0),
            scale_range: (0.9, 1.1),
            translation_range_frac: (-0.05, 0.05),
            fill_value: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(AugmentError::InvalidPolicy(format!("{name} range ({lo}, {hi}) must be finite with min <= max")));
    }
    Ok(())
}

impl AugmentationPolicy {
    /// A policy whose every draw is the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_range_deg: (0.0, 0.0),
            x_reflection: false,
            y_reflection: false,
            shear_range_deg: (0.0, 0.0),
            scale_range: (1.0, 1.0),
            translation_range_frac: (0.0, 0.0),
            fill_value: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_range("rotation", self.rotation_range_deg)?;
        check_range("shear", self.shear_range_deg)?;
        check_range("scale", self.scale_range)?;
        check_range("translation", self.translation_range_frac)?;
        let (s0, s1) = self.shear_range_deg;
        if s0.abs() >= 90.0 || s1.abs() >= 90.0 {
            return Err(AugmentError::InvalidPolicy("shear angles must lie strictly within (-90, 90)".into()));
        }
        if self.scale_range.0 <= 0.0 {
            return Err(AugmentError::InvalidPolicy("scale factors must be positive".into()));
        }
        let (t0, t1) = self.translation_range_frac;
        if t0 < -0.5 || t1 > 0.5 {
            return Err(AugmentError::InvalidPolicy("translation fractions must lie in [-0.5, 0.5]".into()));
        }
        Ok(())
    }
}

/// One concrete draw from a policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformInstance {
    pub rotation_deg: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    pub shear_x_deg: f64,
    pub shear_y_deg: f64,
    pub scale: f64,
    pub translate_x_px: i32,
    pub translate_y_px: i32,
}

impl TransformInstance {
    pub const IDENTITY: Self = Self {
        rotation_deg: 0.0,
        flip_x: false,
        flip_y: false,
        shear_x_deg: 0.0,
        shear_y_deg: 0.0,
        scale: 1.0,
        translate_x_px: 0,
        translate_y_px: 0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

impl Default for TransformInstance {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn shift_px(rng: &mut impl Rng, (lo, hi): (f64, f64), side: u32) -> i32 {
    let half = (side / 2) as i32;
    let v = (rng.gen_range(lo..=hi) * side as f64).round() as i32;
    v.clamp(-half, half)
}

/// Draws one instance for an image of `(height, width)`. Flips fire with
/// probability 0.5 each when enabled.
pub fn sample_transform(policy: &AugmentationPolicy, (h, w): (u32, u32), rng: &mut impl Rng) -> TransformInstance {
    let flip_x = policy.x_reflection && rng.gen_bool(0.5);
    let flip_y = policy.y_reflection && rng.gen_bool(0.5);
    let (r0, r1) = policy.rotation_range_deg;
    let (s0, s1) = policy.shear_range_deg;
    let (c0, c1) = policy.scale_range;
    TransformInstance {
        flip_x,
        flip_y,
        rotation_deg: rng.gen_range(r0..=r1),
        shear_x_deg: rng.gen_range(s0..=s1),
        shear_y_deg: rng.gen_range(s0..=s1),
        scale: rng.gen_range(c0..=c1),
        translate_x_px: shift_px(rng, policy.translation_range_frac, w),
        translate_y_px: shift_px(rng, policy.translation_range_frac, h),
    }
}

/// Sequential per-worker instance stream.
#[derive(Debug, Clone)]
pub struct TransformSampler {
    policy: AugmentationPolicy,
    rng: ChaCha8Rng,
}

impl TransformSampler {
    pub fn new(policy: AugmentationPolicy, seed: u64) -> Result<Self> {
        policy.validate()?;
        Ok(Self { policy, rng: seed::rng(seed) })
    }

    /// Sampler for one worker, seeded from `(base_seed, worker)`.
    pub fn for_worker(policy: AugmentationPolicy, base_seed: u64, worker: u64) -> Result<Self> {
        Self::new(policy, seed::derive_seed(base_seed, worker))
    }

    pub fn policy(&self) -> &AugmentationPolicy {
        &self.policy
    }

    pub fn sample(&mut self, size: (u32, u32)) -> TransformInstance {
        sample_transform(&self.policy, size, &mut self.rng)
    }
}

fn centre(img: &RgbImage) -> (f64, f64) {
    ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0)
}

const EDGE_EPS: f64 = 1e-9;

fn bilinear(img: &RgbImage, x: f64, y: f64, fill: u8) -> Rgb<u8> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(x >= -EDGE_EPS && y >= -EDGE_EPS && x <= w - 1.0 + EDGE_EPS && y <= h - 1.0 + EDGE_EPS) {
        return Rgb([fill; 3]);
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (p00, p10, p01, p11) = (img.get_pixel(x0, y0), img.get_pixel(x1, y0), img.get_pixel(x0, y1), img.get_pixel(x1, y1));
    Rgb(std::array::from_fn(|c| {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
    }))
}

/// Resamples `img` through `inverse`, which maps centred output coordinates
/// to centred source coordinates.
fn warp(img: &RgbImage, fill: u8, inverse: impl Fn(f64, f64) -> (f64, f64)) -> RgbImage {
    let (cx, cy) = centre(img);
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = inverse(x as f64 - cx, y as f64 - cy);
        bilinear(img, sx + cx, sy + cy, fill)
    })
}

pub fn flip(img: &RgbImage, axis: FlipAxis) -> RgbImage {
    match axis {
        FlipAxis::Horizontal => image::imageops::flip_horizontal(img),
        FlipAxis::Vertical => image::imageops::flip_vertical(img),
    }
}

/// Rotates content by `angle_deg` about the centre (positive turns from the
/// +x axis towards +y, i.e. clockwise on screen).
pub fn rotate(img: &RgbImage, angle_deg: f64, fill: u8) -> RgbImage {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    warp(img, fill, |x, y| (c * x + s * y, -s * x + c * y))
}

/// Forward shear matrix `[[1, kx], [ky, ky*kx + 1]]`, the x shear followed by
/// the y shear, with `k = tan(angle)`.
pub fn shear_matrix(shear_x_deg: f64, shear_y_deg: f64) -> [[f64; 2]; 2] {
    let kx = shear_x_deg.to_radians().tan();
    let ky = shear_y_deg.to_radians().tan();
    [[1.0, kx], [ky, ky * kx + 1.0]]
}

fn check_shear(angle: f64) -> Result<()> {
    if !angle.is_finite() || angle.abs() >= 90.0 {
        return Err(AugmentError::InvalidTransform(format!("shear angle {angle} must lie strictly within (-90, 90) degrees")));
    }
    Ok(())
}

pub fn shear(img: &RgbImage, shear_x_deg: f64, shear_y_deg: f64, fill: u8) -> Result<RgbImage> {
    check_shear(shear_x_deg)?;
    check_shear(shear_y_deg)?;
    if shear_x_deg == 0.0 && shear_y_deg == 0.0 {
        return Ok(img.clone());
    }
    // unit determinant, so the inverse is the adjugate
    let [[a, b], [c, d]] = shear_matrix(shear_x_deg, shear_y_deg);
    Ok(warp(img, fill, |x, y| (d * x - b * y, -c * x + a * y)))
}

/// Scales content about the centre on an unchanged canvas.
pub fn rescale(img: &RgbImage, factor: f64, fill: u8) -> Result<RgbImage> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(AugmentError::InvalidTransform(format!("scale factor {factor} must be positive")));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    Ok(warp(img, fill, |x, y| (x / factor, y / factor)))
}

/// Shifts content by whole pixels: output `(r + dy, c + dx)` is input `(r, c)`.
pub fn translate(img: &RgbImage, dx: i32, dy: i32, fill: u8) -> Result<RgbImage> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if 2 * (dx as i64).abs() > w || 2 * (dy as i64).abs() > h {
        return Err(AugmentError::InvalidTransform(format!("shift ({dx}, {dy}) exceeds half of the {w}x{h} image")));
    }
    if dx == 0 && dy == 0 {
        return Ok(img.clone());
    }
    Ok(RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = (x as i64 - dx as i64, y as i64 - dy as i64);
        if sx < 0 || sy < 0 || sx >= w || sy >= h {
            Rgb([fill; 3])
        } else {
            *img.get_pixel(sx as u32, sy as u32)
        }
    }))
}

/// Applies flip, rotate, shear, rescale and translate in that order.
pub fn apply(img: &RgbImage, t: &TransformInstance, fill: u8) -> Result<RgbImage> {
    let mut out = img.clone();
    if t.flip_x {
        out = flip(&out, FlipAxis::Horizontal);
    }
    if t.flip_y {
        out = flip(&out, FlipAxis::Vertical);
    }
    if !t.rotation_deg.is_finite() {
        return Err(AugmentError::InvalidTransform(format!("rotation {} is not finite", t.rotation_deg)));
    }
    out = rotate(&out, t.rotation_deg, fill);
    out = shear(&out, t.shear_x_deg, t.shear_y_deg, fill)?;
    out = rescale(&out, t.scale, fill)?;
    translate(&out, t.translate_x_px, t.translate_y_px, fill)
}

/// Tiles equally sized images into a `cols`-wide contact sheet.
pub fn contact_sheet(images: &[RgbImage], cols: usize) -> RgbImage {
    let Some(first) = images.first() else {
        return RgbImage::new(0, 0);
    };
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (w, h) = first.dimensions();
    let mut sheet = RgbImage::new(w * cols as u32, h * rows as u32);
    for (i, img) in images.iter().enumerate() {
        let (x, y) = ((i % cols) as i64 * w as i64, (i / cols) as i64 * h as i64);
        image::imageops::overlay(&mut sheet, img, x, y);
    }
    sheet
}
