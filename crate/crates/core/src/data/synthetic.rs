use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetManifest, ImageSample, Result};
use crate::label::Label;
use crate::seed;

const TINT: [f64; 3] = [1.0, 0.74, 0.42];
const NOISE: f64 = 0.03;
const MIN_SIDE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_fertile: usize,
    pub n_infertile: usize,
    /// `(height, width)` in pixels.
    pub size: (u32, u32),
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_fertile: usize, n_infertile: usize, size: (u32, u32), seed: u64) -> Self {
        Self { n_fertile, n_infertile, size, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.0 < MIN_SIDE || self.size.1 < MIN_SIDE {
            return Err(DataError::InvalidParameter(format!(
                "synthetic image size {:?} is below {MIN_SIDE}x{MIN_SIDE}",
                self.size
            )));
        }
        Ok(())
    }

    fn stream(&self, label: Label, index: usize) -> ChaCha8Rng {
        seed::stream_rng(self.seed, ((label.index() as u64) << 32) | index as u64)
    }
}

/// Shell outline and glow profile of one synthetic egg, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EggGeometry {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    /// Semi-axis along the rotated y direction.
    pub b: f64,
    pub angle: f64,
    pub peak: f64,
    /// Fractional brightness drop from centre to shell.
    pub falloff: f64,
}

impl EggGeometry {
    pub fn sample(rng: &mut impl Rng, (h, w): (u32, u32)) -> Self {
        let (w, h) = (w as f64, h as f64);
        Self {
            cx: w * (0.5 + rng.gen_range(-0.05..=0.05)),
            cy: h * (0.5 + rng.gen_range(-0.05..=0.05)),
            a: w * rng.gen_range(0.28..=0.34),
            b: h * rng.gen_range(0.36..=0.42),
            angle: rng.gen_range(-15.0..=15.0f64).to_radians(),
            peak: rng.gen_range(0.75..=1.0),
            falloff: rng.gen_range(0.25..=0.45),
        }
    }

    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        ((c * dx + s * dy) / self.a, (-s * dx + c * dy) / self.b)
    }

    fn local_to_image(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (lx, ly) = (u * self.a, v * self.b);
        (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly)
    }

    /// Normalised elliptical radius: 1 on the shell.
    pub fn radius(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.local(x, y);
        u.hypot(v)
    }

    /// Fraction of the pixel centred at `(x, y)` covered by the shell,
    /// from a first-order signed-distance estimate.
    pub fn coverage(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.local(x, y);
        let r = u.hypot(v);
        if r < 1e-9 {
            return 1.0;
        }
        let grad = (u * u / (self.a * self.a) + v * v / (self.b * self.b)).sqrt() / r;
        let d = (r - 1.0) / grad;
        (0.5 - d).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
struct Embryo {
    x: f64,
    y: f64,
    sigma: f64,
    depth: f64,
    vessels: Vec<Vec<(f64, f64)>>,
    vessel_width: f64,
    vessel_depth: f64,
}

impl Embryo {
    fn sample(rng: &mut impl Rng, egg: &EggGeometry, scale: f64) -> Self {
        let (x, y) = egg.local_to_image(rng.gen_range(-0.3..=0.3), rng.gen_range(-0.3..=0.3));
        let sigma = egg.a * rng.gen_range(0.16..=0.24);
        let mut vessels = Vec::new();
        let n = rng.gen_range(4..=7);
        for _ in 0..n {
            let heading = rng.gen_range(0.0..2.0 * PI);
            let steps = rng.gen_range(6..=10);
            grow_vessel(rng, egg, (x, y), heading, steps, 1, &mut vessels);
        }
        Self {
            x,
            y,
            sigma,
            depth: rng.gen_range(0.45..=0.7),
            vessels,
            vessel_width: rng.gen_range(0.8..=1.4) * scale,
            vessel_depth: rng.gen_range(0.3..=0.5),
        }
    }

    /// Multiplicative darkening in `[0, 1)` at a pixel; vessels do not stack.
    fn darkening(&self, x: f64, y: f64, vessel_map: f64) -> f64 {
        let d2 = (x - self.x).powi(2) + (y - self.y).powi(2);
        let blob = self.depth * (-d2 / (2.0 * self.sigma * self.sigma)).exp();
        1.0 - (1.0 - blob) * (1.0 - vessel_map)
    }

    /// Rasterises vessel polylines into a per-pixel darkening map.
    fn vessel_map(&self, w: usize, h: usize) -> Vec<f64> {
        let mut map = vec![0.0f64; w * h];
        let r = self.vessel_width;
        let reach = r.ceil() as i64 + 1;
        for line in &self.vessels {
            for seg in line.windows(2) {
                let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
                let len = (x1 - x0).hypot(y1 - y0);
                let steps = (len * 2.0).ceil().max(1.0) as usize;
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let (px, py) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                    let (ix, iy) = (px.floor() as i64, py.floor() as i64);
                    for yy in (iy - reach).max(0)..=(iy + reach).min(h as i64 - 1) {
                        for xx in (ix - reach).max(0)..=(ix + reach).min(w as i64 - 1) {
                            let d = (xx as f64 + 0.5 - px).hypot(yy as f64 + 0.5 - py);
                            let v = self.vessel_depth * (r - d + 0.5).clamp(0.0, 1.0);
                            let cell: &mut f64 = &mut map[yy as usize * w + xx as usize];
                            *cell = cell.max(v);
                        }
                    }
                }
            }
        }
        map
    }
}

fn grow_vessel(
    rng: &mut impl Rng,
    egg: &EggGeometry,
    start: (f64, f64),
    mut heading: f64,
    steps: usize,
    depth: usize,
    out: &mut Vec<Vec<(f64, f64)>>,
) {
    let mut line = vec![start];
    let mut p = start;
    for _ in 0..steps {
        heading += rng.gen_range(-0.5..=0.5);
        let len = egg.a * rng.gen_range(0.05..=0.09);
        let next = (p.0 + len * heading.cos(), p.1 + len * heading.sin());
        if egg.radius(next.0, next.1) > 0.92 {
            break;
        }
        line.push(next);
        p = next;
        if depth < 3 && rng.gen_bool(0.3) {
            let turn = if rng.gen_bool(0.5) { 0.6 } else { -0.6 };
            grow_vessel(rng, egg, p, heading + turn, steps / 2, depth + 1, out);
        }
    }
    if line.len() > 1 {
        out.push(line);
    }
}

fn render_stream(spec: &SyntheticSpec, mut rng: ChaCha8Rng, fertile: bool) -> RgbImage {
    let (h, w) = spec.size;
    let egg = EggGeometry::sample(&mut rng, spec.size);
    let scale = w.min(h) as f64 / 256.0;
    let embryo = Embryo::sample(&mut rng, &egg, scale);
    let vessels = if fertile { embryo.vessel_map(w as usize, h as usize) } else { Vec::new() };
    let mut img = RgbImage::new(w, h);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let cover = egg.coverage(fx, fy);
        if cover <= 0.0 {
            continue;
        }
        let r = egg.radius(fx, fy).min(1.0);
        let mut v = egg.peak * (1.0 - egg.falloff * r * r) * cover;
        v *= 1.0 + rng.gen_range(-NOISE..=NOISE);
        if fertile {
            v *= 1.0 - embryo.darkening(fx, fy, vessels[y as usize * w as usize + x as usize]);
        }
        *px = Rgb(TINT.map(|t| (v * t * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    img
}

/// Renders the same egg (geometry and noise) once with and once without an
/// embryo.
pub fn render_pair(spec: &SyntheticSpec, index: usize) -> (RgbImage, RgbImage) {
    let fertile = render_stream(spec, spec.stream(Label::Fertile, index), true);
    let infertile = render_stream(spec, spec.stream(Label::Fertile, index), false);
    (fertile, infertile)
}

/// Writes `<out_dir>/<label>/<label>_NNNN.png` for every requested image and
/// returns the resulting manifest (no split assigned).
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let jobs: Vec<(Label, usize)> = (0..spec.n_fertile)
        .map(|i| (Label::Fertile, i))
        .chain((0..spec.n_infertile).map(|i| (Label::Infertile, i)))
        .collect();
    for label in Label::ALL {
        let dir = out_dir.join(label.as_str());
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
    }
    let samples = jobs
        .par_iter()
        .map(|&(label, i)| {
            let name = format!("{}_{i:04}", label.as_str());
            let path = out_dir.join(label.as_str()).join(format!("{name}.png"));
            let img = render_stream(spec, spec.stream(label, i), label == Label::Fertile);
            img.save(&path).map_err(|source| match source {
                image::ImageError::IoError(e) => DataError::io(&path, e),
                source => DataError::Encode { path: path.clone(), source },
            })?;
            Ok(ImageSample { id: format!("{}/{name}", label.as_str()), path, label })
        })
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(samples)
}
