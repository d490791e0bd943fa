//! Synthetic knee-like scenes with known embedding transforms.
//!
//! The reference pattern is an analytic image on the plane: two bright
//! condyles over a dark joint gap, a tibial plateau below, and the shafts of
//! both bones fading out past the frame, all under a faint texture. A sample
//! places the pattern in a canvas through a ground-truth warp, so that
//! extracting the patch at the true warp reproduces the reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Image, Point2, WarpParams};

/// Smooth step from 0 (for `d >= w`) to 1 (for `d <= -w`) over a signed distance.
fn soft_inside(d: f64, w: f64) -> f64 {
    1.0 / (1.0 + (d / w).exp())
}

/// Approximate signed distance to an axis-aligned ellipse (negative inside).
fn ellipse_sd(p: Point2, c: Point2, rx: f64, ry: f64) -> f64 {
    let (dx, dy) = ((p.x - c.x) / rx, (p.y - c.y) / ry);
    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry)
}

fn box_sd(p: Point2, c: Point2, hx: f64, hy: f64, round: f64) -> f64 {
    let qx = (p.x - c.x).abs() - hx + round;
    let qy = (p.y - c.y).abs() - hy + round;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0) - round
}

/// Intensity of the reference pattern at a normalized point.
pub fn reference_pattern(p: Point2) -> f64 {
    let edge = 0.025;
    let fade = |y: f64, start: f64| soft_inside(y.abs() - start, 0.08);

    let background = 0.08;
    // femur: shaft above, two condyles
    let shaft_f = soft_inside(box_sd(p, Point2::new(0.0, -0.95), 0.34, 0.6, 0.1), edge) * fade(p.y, 1.05);
    let cond_l = soft_inside(ellipse_sd(p, Point2::new(-0.36, -0.2), 0.31, 0.24), edge);
    let cond_r = soft_inside(ellipse_sd(p, Point2::new(0.33, -0.19), 0.29, 0.23), edge);
    let notch = soft_inside(ellipse_sd(p, Point2::new(0.0, -0.08), 0.09, 0.12), edge);
    let femur = (shaft_f.max(cond_l).max(cond_r) * (1.0 - 0.7 * notch)).clamp(0.0, 1.0);

    // tibia: plateau with spines, shaft below
    let plateau = soft_inside(box_sd(p, Point2::new(0.0, 0.36), 0.7, 0.2, 0.08), edge);
    let shaft_t = soft_inside(box_sd(p, Point2::new(0.0, 0.95), 0.3, 0.6, 0.1), edge) * fade(p.y, 1.05);
    let spine_l = soft_inside(ellipse_sd(p, Point2::new(-0.08, 0.14), 0.05, 0.07), edge);
    let spine_r = soft_inside(ellipse_sd(p, Point2::new(0.09, 0.14), 0.05, 0.07), edge);
    let tibia = plateau.max(shaft_t).max(spine_l).max(spine_r);

    // fibula head on the lateral side
    let fibula = soft_inside(ellipse_sd(p, Point2::new(0.72, 0.62), 0.1, 0.14), edge);

    // cortical rims are brighter than the interior
    let rim = |v: f64| 4.0 * v * (1.0 - v);
    // soft-tissue texture over the whole plane, bone included
    let texture = 0.04 * (23.0 * p.x + 3.0).sin() * (19.0 * p.y - 1.0).cos()
        + 0.03 * (31.0 * (p.x + p.y)).sin();

    let bone = femur.max(tibia).max(0.8 * fibula);
    let v = background
        + 0.55 * bone
        + 0.12 * rim(femur).max(rim(tibia))
        + texture;
    v.clamp(0.0, 1.0)
}

/// The reference image: the pattern rasterized on a `side x side` grid.
pub fn reference_image(side: usize) -> Result<Image> {
    Image::from_fn(side, side, reference_pattern)
}

/// Canvas image in which extracting `truth` reproduces the pattern.
pub fn embed(truth: &WarpParams, side: usize, extra: impl Fn(Point2) -> f64) -> Result<Image> {
    let (sin, cos) = truth.angle.sin_cos();
    let inv = 1.0 / truth.scale;
    Image::from_fn(side, side, |q| {
        let (dx, dy) = (q.x - truth.shift_x, q.y - truth.shift_y);
        // inverse of scale * rotation
        let p = Point2::new(inv * (cos * dx + sin * dy), inv * (-sin * dx + cos * dy));
        reference_pattern(p) + extra(q)
    })
}

/// Ranges for the synthetic harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub side: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_angle: f64,
    /// Fraction of the reachable translation range `|1 - scale|` that is used.
    pub shift_fraction: f64,
    pub max_clutter: usize,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            side: 224,
            scale_min: 0.8,
            scale_max: 1.2,
            max_angle: 0.1,
            shift_fraction: 0.8,
            max_clutter: 3,
            noise_sigma: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::Config("scale range must be positive and ordered".into()));
        }
        if !(0.0..0.1 + 1e-12).contains(&self.max_angle) {
            return Err(Error::Config("max angle must lie in [0, 0.1]".into()));
        }
        if !(0.0..1.0).contains(&self.shift_fraction) {
            return Err(Error::Config("shift fraction must lie in [0, 1)".into()));
        }
        if !(self.noise_sigma >= 0.0) || self.side < 8 {
            return Err(Error::Config("noise must be nonnegative and side at least 8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub intensity: f64,
}

/// Ground truth written next to each synthetic image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub angle: f64,
    pub seed: u64,
    pub index: usize,
    pub clutter: Vec<Ellipse>,
    pub noise_sigma: f64,
}

impl Truth {
    pub fn warp(&self) -> WarpParams {
        WarpParams::new(self.scale, self.shift_x, self.shift_y, self.angle)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub truth: Truth,
}

/// Deterministic batch of `count` scenes.
pub fn synth_dataset(seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    (0..count).map(|i| synth_sample(seed, i, cfg)).collect()
}

pub fn synth_sample(seed: u64, index: usize, cfg: &SynthConfig) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let angle = if cfg.max_angle > 0.0 {
        rng.random_range(-cfg.max_angle..=cfg.max_angle)
    } else {
        0.0
    };
    let reach = (1.0 - scale).abs() * cfg.shift_fraction;
    let mut shift = || if reach > 0.0 { rng.random_range(-reach..=reach) } else { 0.0 };
    let (shift_x, shift_y) = (shift(), shift());
    let truth_warp = WarpParams::new(scale, shift_x, shift_y, angle);

    let n_clutter = rng.random_range(0..=cfg.max_clutter);
    let clutter: Vec<Ellipse> = (0..n_clutter)
        .map(|_| Ellipse {
            center: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            radii: [rng.random_range(0.04..0.15), rng.random_range(0.04..0.15)],
            intensity: rng.random_range(0.15..0.4),
        })
        .collect();

    let image = embed(&truth_warp, cfg.side, |q| {
        clutter
            .iter()
            .map(|e| {
                let c = Point2::new(e.center[0], e.center[1]);
                e.intensity * soft_inside(ellipse_sd(q, c, e.radii[0], e.radii[1]), 0.01)
            })
            .sum()
    })?;

    let image = if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let data = image
            .data()
            .iter()
            .map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        Image::new(image.height(), image.width(), data)?
    } else {
        image
    };

    Ok(SynthSample {
        image,
        truth: Truth {
            scale,
            shift_x,
            shift_y,
            angle,
            seed,
            index,
            clutter,
            noise_sigma: cfg.noise_sigma,
        },
    })
}
