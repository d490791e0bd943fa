//! Registration accuracy against known embedding transforms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{affine_matrix, Point2, WarpParams};

/// Side of the raster used for box IoU.
pub const IOU_GRID: usize = 512;
/// Patch side, in pixels of the reference pattern, used to express sizes.
pub const PATTERN_SIDE: f64 = 224.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub center_error: f64,
    pub iou: f64,
    pub scale_error: f64,
    /// Side of the input crop measured in reference-pattern pixels.
    pub input_side: f64,
    /// Side of the registered patch in the same units.
    pub registered_side: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: Vec<SampleMetrics>,
    pub median_center_error: f64,
    pub mean_center_error: f64,
    pub median_iou: f64,
    pub mean_iou: f64,
    pub median_scale_error: f64,
    pub mean_scale_error: f64,
    pub input_size_variance: f64,
    pub registered_size_variance: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64
}

fn corners(w: &WarpParams) -> Result<[Point2; 4]> {
    let a = affine_matrix(w)?;
    Ok([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(x, y)| a.apply(Point2::new(x, y))))
}

fn contains(w: &WarpParams, q: Point2) -> bool {
    let (sin, cos) = w.angle.sin_cos();
    let (dx, dy) = (q.x - w.shift_x, q.y - w.shift_y);
    let x = (cos * dx + sin * dy) / w.scale;
    let y = (-sin * dx + cos * dy) / w.scale;
    x.abs() <= 1.0 && y.abs() <= 1.0
}

/// IoU of the two warped unit squares, rasterized on a grid over their joint bounding box.
pub fn box_iou(a: &WarpParams, b: &WarpParams) -> Result<f64> {
    if !(a.scale > 0.0 && b.scale > 0.0) {
        return Err(Error::Domain("box scales must be positive".into()));
    }
    let pts: Vec<Point2> = corners(a)?.into_iter().chain(corners(b)?).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let (sx, sy) = ((x1 - x0) / IOU_GRID as f64, (y1 - y0) / IOU_GRID as f64);
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..IOU_GRID {
        for c in 0..IOU_GRID {
            let q = Point2::new(x0 + (c as f64 + 0.5) * sx, y0 + (r as f64 + 0.5) * sy);
            let (ia, ib) = (contains(a, q), contains(b, q));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

pub fn sample_metrics(result: &WarpParams, truth: &WarpParams) -> Result<SampleMetrics> {
    let input_side = PATTERN_SIDE / truth.scale;
    Ok(SampleMetrics {
        center_error: ((result.shift_x - truth.shift_x).powi(2) + (result.shift_y - truth.shift_y).powi(2)).sqrt(),
        iou: box_iou(result, truth)?,
        scale_error: (result.scale - truth.scale).abs(),
        input_side,
        registered_side: result.scale * input_side,
    })
}

/// Compares matched lists of recovered and true warps.
pub fn eval(results: &[WarpParams], truths: &[WarpParams]) -> Result<EvalMetrics> {
    if results.len() != truths.len() {
        return Err(Error::Usage(format!(
            "{} results but {} truths",
            results.len(),
            truths.len()
        )));
    }
    if results.is_empty() {
        return Err(Error::Usage("nothing to evaluate".into()));
    }
    let samples = results
        .iter()
        .zip(truths)
        .map(|(r, t)| sample_metrics(r, t))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).collect::<Vec<f64>>();
    let (ce, iou, se) = (col(|s| s.center_error), col(|s| s.iou), col(|s| s.scale_error));
    Ok(EvalMetrics {
        median_center_error: median(&ce),
        mean_center_error: mean(&ce),
        median_iou: median(&iou),
        mean_iou: mean(&iou),
        median_scale_error: median(&se),
        mean_scale_error: mean(&se),
        input_size_variance: variance(&col(|s| s.input_side)),
        registered_size_variance: variance(&col(|s| s.registered_side)),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes() {
        let t = WarpParams::new(0.9, 0.05, -0.02, 0.07);
        let m = eval(&[t], &[t]).unwrap();
        assert_eq!(m.median_iou, 1.0);
        assert_eq!(m.median_center_error, 0.0);
        assert_eq!(m.median_scale_error, 0.0);
    }

    #[test]
    fn disjoint_and_half_overlap() {
        let a = WarpParams::new(0.5, -0.6, 0.0, 0.0);
        let b = WarpParams::new(0.5, 0.6, 0.0, 0.0);
        assert_eq!(box_iou(&a, &b).unwrap(), 0.0);
        // same size, shifted by half a side: overlap 1/2 over union 3/2
        let a = WarpParams::new(0.5, 0.0, 0.0, 0.0);
        let b = WarpParams::new(0.5, 0.5, 0.0, 0.0);
        assert!((box_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() <= 0.01);
    }

    #[test]
    fn length_mismatch_is_usage_error() {
        assert!(matches!(eval(&[WarpParams::IDENTITY], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn stats() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(variance(&[1.0, 1.0]), 0.0);
        assert_eq!(variance(&[0.0, 2.0]), 1.0);
    }
}
