//! Stochastic operators: point sampling inside boxes, coordinate jitter,
//! rectangular cutout masking, and image flips. Every operator takes an
//! explicit RNG so callers control reproducibility.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::geometry::{BoxCCWH, Point2};

/// Uniform half-width of the coordinate noise applied by [`jitter_point`].
pub const JITTER_AMPLITUDE: f64 = 0.05;

/// How annotation points are drawn inside a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PointSampling {
    /// Uniform over the box interior.
    #[default]
    Uniform,
    /// Truncated Gaussian around the box center; `sigma_frac` scales the
    /// standard deviation relative to each half-extent.
    CenterGaussian { sigma_frac: f64 },
}

/// Draw one point strictly inside `bx` (intersected with the unit square).
pub fn sample_point(bx: &BoxCCWH, mode: PointSampling, rng: &mut impl Rng) -> Point2 {
    let c = bx.clamp_to_unit(1e-6).to_corners();
    match mode {
        PointSampling::Uniform => {
            let ux = open_unit(rng);
            let uy = open_unit(rng);
            Point2 {
                x: c.x1 + ux * (c.x2 - c.x1),
                y: c.y1 + uy * (c.y2 - c.y1),
            }
        }
        PointSampling::CenterGaussian { sigma_frac } => {
            let cx = 0.5 * (c.x1 + c.x2);
            let cy = 0.5 * (c.y1 + c.y2);
            let sx = sigma_frac * 0.5 * (c.x2 - c.x1);
            let sy = sigma_frac * 0.5 * (c.y2 - c.y1);
            // rejection keeps the draw strictly inside the box
            loop {
                let (gx, gy) = gauss_pair(rng);
                let x = cx + gx * sx;
                let y = cy + gy * sy;
                if x > c.x1 && x < c.x2 && y > c.y1 && y < c.y2 {
                    return Point2 { x, y };
                }
            }
        }
    }
}

/// Two independent draws inside the same box.
pub fn sample_point_pair(
    bx: &BoxCCWH,
    mode: PointSampling,
    rng: &mut impl Rng,
) -> (Point2, Point2) {
    (sample_point(bx, mode, rng), sample_point(bx, mode, rng))
}

/// Perturb each coordinate by an independent uniform draw in
/// `[-amplitude, amplitude]`, then clamp into the unit square.
pub fn jitter_point(p: Point2, amplitude: f64, rng: &mut impl Rng) -> Point2 {
    let dx = rng.random_range(-amplitude..=amplitude);
    let dy = rng.random_range(-amplitude..=amplitude);
    Point2 {
        x: (p.x + dx).clamp(0.0, 1.0),
        y: (p.y + dy).clamp(0.0, 1.0),
    }
}

/// Cutout configuration: rectangle count range and per-rectangle area range
/// as fractions of the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub min_rects: usize,
    pub max_rects: usize,
    pub area_min: f64,
    pub area_max: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            min_rects: 1,
            max_rects: 3,
            area_min: 0.05,
            area_max: 0.15,
        }
    }
}

impl MaskConfig {
    /// Configuration that draws no rectangles (identity mask).
    pub fn disabled() -> Self {
        Self {
            min_rects: 0,
            max_rects: 0,
            area_min: 0.0,
            area_max: 0.0,
        }
    }
}

/// Occlude 1–3 random rectangles with the image mean, never covering the
/// pixel under `protect`. Returns a fresh image; the input is untouched.
pub fn apply_mask(
    img: &ImageSample,
    cfg: &MaskConfig,
    protect: Point2,
    rng: &mut impl Rng,
) -> ImageSample {
    let mut out = img.clone();
    if cfg.max_rects == 0 {
        return out;
    }
    let (h, w) = (img.height(), img.width());
    let fill = img.mean_intensity();
    let px = ((protect.x * w as f64) as usize).min(w - 1);
    let py = ((protect.y * h as f64) as usize).min(h - 1);
    let n = rng.random_range(cfg.min_rects..=cfg.max_rects);
    for _ in 0..n {
        // resample a rectangle that avoids the protected pixel
        for _attempt in 0..32 {
            let area = rng.random_range(cfg.area_min..=cfg.area_max) * (h * w) as f64;
            let aspect: f64 = rng.random_range(0.4..2.5);
            let rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
            let rh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
            let x0 = rng.random_range(0..=w - rw);
            let y0 = rng.random_range(0..=h - rh);
            let covers_protect = px >= x0 && px < x0 + rw && py >= y0 && py < y0 + rh;
            if covers_protect {
                continue;
            }
            out.pixels
                .slice_mut(s![y0..y0 + rh, x0..x0 + rw])
                .fill(fill);
            break;
        }
    }
    out
}

/// Reverse column order; exact involution.
pub fn hflip_image(img: &ImageSample) -> ImageSample {
    let (h, w) = (img.height(), img.width());
    let pixels = Array2::from_shape_fn((h, w), |(r, c)| img.pixels[[r, w - 1 - c]]);
    ImageSample {
        id: img.id.clone(),
        pixels,
    }
}

fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.random_range(0.0..1.0);
        if u > 0.0 {
            return u;
        }
    }
}

fn gauss_pair(rng: &mut impl Rng) -> (f64, f64) {
    let u1 = open_unit(rng);
    let u2: f64 = rng.random_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let t = 2.0 * std::f64::consts::PI * u2;
    (r * t.cos(), r * t.sin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_box() -> BoxCCWH {
        BoxCCWH::new(0.5, 0.5, 1.0, 1.0).unwrap()
    }

    #[test]
    fn sample_point_uniform_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = full_box();
        let (mut sx, mut sy) = (0.0, 0.0);
        let n = 10_000;
        for _ in 0..n {
            let p = sample_point(&b, PointSampling::Uniform, &mut rng);
            sx += p.x;
            sy += p.y;
        }
        assert!((sx / n as f64 - 0.5).abs() < 0.02);
        assert!((sy / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn sample_point_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100_000 {
            let w = rng.random_range(0.01..0.8);
            let h = rng.random_range(0.01..0.8);
            let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
            let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
            let b = BoxCCWH::new(cx, cy, w, h).unwrap();
            let p = sample_point(&b, PointSampling::Uniform, &mut rng);
            assert!(b.contains(p), "{p:?} outside {b:?}");
        }
    }

    #[test]
    fn sample_point_sliver_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = BoxCCWH::new(0.3, 0.6, 1e-4, 1e-4).unwrap();
        for _ in 0..100 {
            let p = sample_point(&b, PointSampling::Uniform, &mut rng);
            assert!((p.x - 0.3).abs() <= 1e-4);
            assert!((p.y - 0.6).abs() <= 1e-4);
        }
    }

    #[test]
    fn center_gaussian_contained() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = BoxCCWH::new(0.4, 0.5, 0.3, 0.2).unwrap();
        let mode = PointSampling::CenterGaussian { sigma_frac: 0.5 };
        for _ in 0..10_000 {
            let p = sample_point(&b, mode, &mut rng);
            assert!(b.contains(p));
        }
    }

    #[test]
    fn point_pair_no_exact_coincidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = BoxCCWH::new(0.5, 0.5, 0.4, 0.4).unwrap();
        let mut coincident = 0;
        for _ in 0..10_000 {
            let (a, bb) = sample_point_pair(&b, PointSampling::Uniform, &mut rng);
            assert!(b.contains(a) && b.contains(bb));
            if a == bb {
                coincident += 1;
            }
        }
        assert_eq!(coincident, 0);
    }

    #[test]
    fn jitter_bounded_and_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Point2 { x: 0.5, y: 0.5 };
        for _ in 0..10_000 {
            let j = jitter_point(p, JITTER_AMPLITUDE, &mut rng);
            assert!((j.x - p.x).abs() <= JITTER_AMPLITUDE + 1e-12);
            assert!((j.y - p.y).abs() <= JITTER_AMPLITUDE + 1e-12);
        }
        let corner = Point2 { x: 0.0, y: 0.0 };
        for _ in 0..1000 {
            let j = jitter_point(corner, JITTER_AMPLITUDE, &mut rng);
            assert!((0.0..=JITTER_AMPLITUDE).contains(&j.x));
            assert!((0.0..=JITTER_AMPLITUDE).contains(&j.y));
        }
    }

    #[test]
    fn jitter_zero_mean_displacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Point2 { x: 0.5, y: 0.5 };
        let n = 10_000;
        let (mut dx, mut dy) = (0.0, 0.0);
        for _ in 0..n {
            let j = jitter_point(p, JITTER_AMPLITUDE, &mut rng);
            dx += j.x - p.x;
            dy += j.y - p.y;
        }
        assert!((dx / n as f64).abs() <= 0.005);
        assert!((dy / n as f64).abs() <= 0.005);
    }

    fn gradient_image(h: usize, w: usize) -> ImageSample {
        ImageSample {
            id: "g".into(),
            pixels: Array2::from_shape_fn((h, w), |(r, c)| {
                (r as f64 / h as f64 + c as f64 / w as f64) / 2.0
            }),
        }
    }

    #[test]
    fn mask_disabled_is_identity() {
        let img = gradient_image(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = apply_mask(
            &img,
            &MaskConfig::disabled(),
            Point2 { x: 0.5, y: 0.5 },
            &mut rng,
        );
        assert_eq!(img, out);
    }

    #[test]
    fn mask_area_fraction_in_range() {
        let img = gradient_image(64, 64);
        let cfg = MaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let out = apply_mask(&img, &cfg, Point2 { x: 0.01, y: 0.01 }, &mut rng);
            let changed = out
                .pixels
                .iter()
                .zip(img.pixels.iter())
                .filter(|(a, b)| a != b)
                .count();
            let frac = changed as f64 / (64.0 * 64.0);
            // up to 3 rects of 15% each; fill-colored pixels may coincide
            assert!(frac <= 0.45 + 1e-9, "masked fraction {frac}");
            assert!(frac >= 0.02, "masked fraction {frac} suspiciously small");
        }
    }

    #[test]
    fn mask_never_touches_protected_pixel() {
        let img = gradient_image(48, 40);
        let cfg = MaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in 0..1000 {
            let protect = Point2 {
                x: (i % 37) as f64 / 37.0,
                y: (i % 23) as f64 / 23.0,
            };
            let out = apply_mask(&img, &cfg, protect, &mut rng);
            let px = ((protect.x * 40.0) as usize).min(39);
            let py = ((protect.y * 48.0) as usize).min(47);
            assert_eq!(out.pixels[[py, px]], img.pixels[[py, px]]);
        }
    }

    #[test]
    fn mask_leaves_input_unmodified() {
        let img = gradient_image(32, 32);
        let snapshot = img.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _ = apply_mask(
            &img,
            &MaskConfig::default(),
            Point2 { x: 0.9, y: 0.9 },
            &mut rng,
        );
        assert_eq!(img, snapshot);
    }

    #[test]
    fn hflip_image_involution_and_index_map() {
        let img = gradient_image(16, 9);
        let f = hflip_image(&img);
        for r in 0..16 {
            for c in 0..9 {
                assert_eq!(f.pixels[[r, c]], img.pixels[[r, 8 - c]]);
            }
        }
        let ff = hflip_image(&f);
        assert_eq!(ff.pixels, img.pixels);

        // column-symmetric image is a fixed point
        let sym = ImageSample {
            id: "s".into(),
            pixels: Array2::from_shape_fn((4, 5), |(r, c)| {
                let cc = c.min(4 - c);
                (r * 10 + cc) as f64 / 50.0
            }),
        };
        assert_eq!(hflip_image(&sym).pixels, sym.pixels);
    }
}
