use candling::augment::{
    apply, flip, rescale, rotate, shear, translate, AugmentationPolicy, FlipAxis, TransformSampler,
};
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = RgbImage> {
    (2u32..24, 2u32..24).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<u8>(), (w * h * 3) as usize)
            .prop_map(move |raw| RgbImage::from_raw(w, h, raw).unwrap())
    })
}

/// Independent forward-matrix oracle: invert numerically, sample bilinearly.
fn shear_oracle(img: &RgbImage, sx: f64, sy: f64) -> RgbImage {
    let kx = sx.to_radians().tan();
    let ky = sy.to_radians().tan();
    // forward = [[1, 0], [ky, 1]] * [[1, kx], [0, 1]]
    let f = [[1.0, kx], [ky, ky * kx + 1.0]];
    let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
    let inv = [[f[1][1] / det, -f[0][1] / det], [-f[1][0] / det, f[0][0] / det]];
    let (cx, cy) = ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0);
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let u = inv[0][0] * dx + inv[0][1] * dy + cx;
        let v = inv[1][0] * dx + inv[1][1] * dy + cy;
        let (w, h) = (img.width() as f64, img.height() as f64);
        if u < -1e-6 || v < -1e-6 || u > w - 1.0 + 1e-6 || v > h - 1.0 + 1e-6 {
            return Rgb([0, 0, 0]);
        }
        let mut acc = [0.0f64; 3];
        for (xi, wx) in [(u.floor(), 1.0 - (u - u.floor())), (u.floor() + 1.0, u - u.floor())] {
            for (yi, wy) in [(v.floor(), 1.0 - (v - v.floor())), (v.floor() + 1.0, v - v.floor())] {
                let (xi, yi) = (xi.clamp(0.0, w - 1.0) as u32, yi.clamp(0.0, h - 1.0) as u32);
                let p = img.get_pixel(xi, yi);
                for c in 0..3 {
                    acc[c] += wx * wy * p[c] as f64;
                }
            }
        }
        Rgb(acc.map(|a| a.round().clamp(0.0, 255.0) as u8))
    })
}

fn max_diff(a: &RgbImage, b: &RgbImage) -> u8 {
    a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y)).max().unwrap_or(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_transform_preserves_dimensions(img in image_strategy(), angle in -180.0f64..180.0, sx in -60.0f64..60.0,
                                            sy in -60.0f64..60.0, scale in 0.2f64..3.0, fx in -0.5f64..0.5, fy in -0.5f64..0.5) {
        let dims = img.dimensions();
        let dx = (fx * dims.0 as f64) as i32;
        let dy = (fy * dims.1 as f64) as i32;
        prop_assert_eq!(rotate(&img, angle, 0).dimensions(), dims);
        prop_assert_eq!(shear(&img, sx, sy, 0).unwrap().dimensions(), dims);
        prop_assert_eq!(rescale(&img, scale, 0).unwrap().dimensions(), dims);
        prop_assert_eq!(translate(&img, dx, dy, 0).unwrap().dimensions(), dims);
        prop_assert_eq!(flip(&img, FlipAxis::Vertical).dimensions(), dims);
    }

    #[test]
    fn flips_are_exact_involutions(img in image_strategy()) {
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            prop_assert_eq!(flip(&flip(&img, axis), axis), img.clone());
        }
    }

    #[test]
    fn shear_matches_affine_oracle(img in image_strategy(), sx in -45.0f64..45.0, sy in -45.0f64..45.0) {
        let out = shear(&img, sx, sy, 0).unwrap();
        prop_assert!(max_diff(&out, &shear_oracle(&img, sx, sy)) <= 2);
    }

    #[test]
    fn sampled_instances_stay_in_range_and_apply(seed: u64, w in 8u32..64, h in 8u32..64) {
        let policy = AugmentationPolicy::default();
        let mut sampler = TransformSampler::new(policy, seed).unwrap();
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 4) as u8, (y * 4) as u8, 77]));
        for _ in 0..8 {
            let t = sampler.sample((h, w));
            prop_assert!((-5.0..=5.0).contains(&t.rotation_deg));
            prop_assert!((-5.0..=5.0).contains(&t.shear_x_deg) && (-5.0..=5.0).contains(&t.shear_y_deg));
            prop_assert!((0.9..=1.1).contains(&t.scale));
            prop_assert!(t.translate_x_px.abs() as f64 <= 0.05 * w as f64 + 0.5);
            prop_assert!(t.translate_y_px.abs() as f64 <= 0.05 * h as f64 + 0.5);
            let out = apply(&img, &t, 0).unwrap();
            prop_assert_eq!(out.dimensions(), (w, h));
            prop_assert_eq!(out.clone(), apply(&img, &t, 0).unwrap());
        }
    }
}
