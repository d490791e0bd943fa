//! Part heatmaps, spatial-configuration multipliers and location blobs.
//!
//! Translations follow `tau_t(h)(x) = h(x - t)`. The multiplier for part `j`
//! reads every other part's heatmap `h^r` at `p + l^r - l^j - k`, where `k`
//! ranges over integer cell offsets inside a disk of `window_radius` cells,
//! each weighted by a peak-one Gaussian `G(k)`.

use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample, cell_center_unchecked, lattice_point, Point2, Stencil};

/// A scalar map over the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Domain(format!(
                "heatmap data of length {} does not fit a {rows}x{cols} grid",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("heatmap contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn sample(&self, p: Point2) -> f64 {
        bilinear_sample(&self.data, self.rows, self.cols, p)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major index of the first maximal entry.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn l1(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn same_grid(&self, other: &Heatmap) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// 8-bit rendering: `round_half_up(255 * v)` after clamping to `[0, 1]`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect()
    }
}

/// Spatial-configuration and blob parameters, in normalized units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfigParams {
    pub sigma_config: f64,
    pub sigma_blob: f64,
    /// Search radius for the multiplier offsets, in cells. `None` picks
    /// `ceil(3 * sigma_config / spacing)`.
    pub window_radius: Option<usize>,
}

impl Default for ConfigParams {
    fn default() -> Self {
        Self {
            sigma_config: 0.08,
            sigma_blob: 0.08,
            window_radius: None,
        }
    }
}

impl ConfigParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_config > 0.0) || !(self.sigma_blob > 0.0) {
            return Err(Error::Config("sigmas must be positive".into()));
        }
        if self.window_radius == Some(0) {
            return Err(Error::Config("window radius must be at least 1".into()));
        }
        Ok(())
    }

    pub fn radius_for(&self, rows: usize, cols: usize) -> usize {
        self.window_radius.unwrap_or_else(|| {
            let spacing = 2.0 / rows.max(cols) as f64;
            ((3.0 * self.sigma_config / spacing).ceil() as usize).max(1)
        })
    }
}

/// Unnormalized Gaussian `exp(-|c - center|^2 / (2 sigma^2))` at every cell center.
pub fn blob(center: Point2, rows: usize, cols: usize, sigma: f64) -> Heatmap {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push((-cell_center_unchecked(r, c, rows, cols).dist2(&center) * inv).exp());
        }
    }
    Heatmap { rows, cols, data }
}

/// Multiplier search window: the disk `dr^2 + dc^2 <= radius^2` with
/// Gaussian weights, which factor into a row and a column term.
#[derive(Clone, Debug)]
pub struct Window {
    pub radius: usize,
    /// Weight of row offset `dr`, at index `dr + radius`.
    pub row_weights: Vec<f64>,
    /// Weight of column offset `dc`, at index `dc + radius`.
    pub col_weights: Vec<f64>,
    /// Largest `|dc|` inside the disk for row offset `dr`, at index `dr + radius`.
    pub half_widths: Vec<usize>,
}

impl Window {
    pub fn new(rows: usize, cols: usize, cfg: &ConfigParams) -> Self {
        let rad = cfg.radius_for(rows, cols);
        let inv = 1.0 / (2.0 * cfg.sigma_config * cfg.sigma_config);
        let weights = |step: f64| -> Vec<f64> {
            (-(rad as isize)..=rad as isize)
                .map(|d| {
                    let k = d as f64 * step;
                    (-k * k * inv).exp()
                })
                .collect()
        };
        let half_widths = (-(rad as isize)..=rad as isize)
            .map(|dr| {
                let mut hw = 0;
                while (hw + 1) * (hw + 1) + (dr * dr) as usize <= rad * rad {
                    hw += 1;
                }
                hw
            })
            .collect();
        Self {
            radius: rad,
            row_weights: weights(2.0 / rows as f64),
            col_weights: weights(2.0 / cols as f64),
            half_widths,
        }
    }

    /// Number of offsets in the disk.
    pub fn len(&self) -> usize {
        self.half_widths.iter().map(|h| 2 * h + 1).sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn check_inputs(hs: &[Heatmap], j: usize, locations: &[Point2]) -> Result<()> {
    let n = hs.len();
    if n < 2 {
        return Err(Error::Domain(format!("multiplier needs at least 2 parts, got {n}")));
    }
    if locations.len() != n {
        return Err(Error::Domain(format!(
            "{} locations for {n} heatmaps",
            locations.len()
        )));
    }
    if j >= n {
        return Err(Error::Domain(format!("part index {j} out of range for {n} parts")));
    }
    if hs.iter().any(|h| !h.same_grid(&hs[0])) {
        return Err(Error::Domain("heatmaps do not share a grid".into()));
    }
    Ok(())
}

/// Spatial-configuration multiplier `M_j`.
pub fn multiplier(hs: &[Heatmap], j: usize, locations: &[Point2], cfg: &ConfigParams) -> Result<Heatmap> {
    check_inputs(hs, j, locations)?;
    let window = Window::new(hs[0].rows, hs[0].cols, cfg);
    Ok(multiplier_with_window(hs, j, locations, &window))
}

pub(crate) fn multiplier_with_window(hs: &[Heatmap], j: usize, locations: &[Point2], window: &Window) -> Heatmap {
    let (rows, cols) = (hs[0].rows, hs[0].cols);
    let rad = window.radius as isize;
    let (erows, ecols) = (rows + 2 * window.radius, cols + 2 * window.radius);
    let mut shifted = vec![0.0; erows * ecols];
    // row_max[hw][a][pc] = max over |dc| <= hw of w(dc) * shifted[a][pc + rad - dc]
    let mut row_max = vec![0.0; (window.radius + 1) * erows * cols];
    let mut best = vec![0.0; rows * cols];
    let mut acc = vec![0.0; rows * cols];
    let wc = &window.col_weights;
    for (r, h) in hs.iter().enumerate() {
        if r == j {
            continue;
        }
        let d = locations[r] - locations[j];
        // shifted[a][b] = h^r(lattice(a - rad, b - rad) + d); the bilinear
        // fractions are the same for every (a, b).
        let st = Stencil::at(lattice_point(-rad, -rad, rows, cols) + d, rows, cols);
        shifted.iter_mut().for_each(|v| *v = 0.0);
        for (tr, tc, wt) in st.taps() {
            if wt == 0.0 {
                continue;
            }
            for a in 0..erows {
                let sr = tr + a as isize;
                if sr < 0 || sr >= rows as isize {
                    continue;
                }
                let src = &h.data[sr as usize * cols..(sr as usize + 1) * cols];
                let dst = &mut shifted[a * ecols..(a + 1) * ecols];
                // columns b with 0 <= tc + b < cols
                let b0 = (-tc).max(0) as usize;
                let b1 = ((cols as isize - tc).min(ecols as isize)).max(0) as usize;
                for b in b0..b1.max(b0) {
                    dst[b] += wt * src[(tc + b as isize) as usize];
                }
            }
        }
        let plane = erows * cols;
        let rw = window.radius;
        for a in 0..erows {
            let src = &shifted[a * ecols..(a + 1) * ecols];
            let out = &mut row_max[a * cols..(a + 1) * cols];
            for (o, s) in out.iter_mut().zip(&src[rw..rw + cols]) {
                *o = wc[rw] * s;
            }
        }
        for hw in 1..=rw {
            let (prev, cur) = row_max.split_at_mut(hw * plane);
            let prev = &prev[(hw - 1) * plane..];
            let (wl, wr) = (wc[rw - hw], wc[rw + hw]);
            for a in 0..erows {
                let src = &shifted[a * ecols..(a + 1) * ecols];
                // dc = -hw reads column pc + rad + hw, dc = hw reads pc + rad - hw
                let left = &src[rw + hw..rw + hw + cols];
                let right = &src[rw - hw..rw - hw + cols];
                let prow = &prev[a * cols..(a + 1) * cols];
                let crow = &mut cur[a * cols..(a + 1) * cols];
                for (((c, p), l), r) in crow.iter_mut().zip(prow).zip(left).zip(right) {
                    let (x, y) = (wl * l, wr * r);
                    let m = if x > y { x } else { y };
                    *c = if m > *p { m } else { *p };
                }
            }
        }
        best.iter_mut().for_each(|v| *v = 0.0);
        for (k, (&wr, &hw)) in window.row_weights.iter().zip(&window.half_widths).enumerate() {
            let dr = k as isize - rad;
            let src_plane = &row_max[hw * plane..(hw + 1) * plane];
            for pr in 0..rows {
                let a = (pr as isize + rad - dr) as usize;
                let src = &src_plane[a * cols..(a + 1) * cols];
                let dst = &mut best[pr * cols..(pr + 1) * cols];
                for (o, s) in dst.iter_mut().zip(src) {
                    let v = wr * s;
                    *o = if v > *o { v } else { *o };
                }
            }
        }
        for (a, b) in acc.iter_mut().zip(&best) {
            *a += b;
        }
    }
    let scale = 1.0 / (hs.len() - 1) as f64;
    acc.iter_mut().for_each(|v| *v = (*v * scale).clamp(0.0, 1.0));
    Heatmap {
        rows,
        cols,
        data: acc,
    }
}

/// Denoised heatmaps `g^j = M_j * h^j` for every part.
pub fn denoise(hs: &[Heatmap], locations: &[Point2], cfg: &ConfigParams) -> Result<Vec<Heatmap>> {
    check_inputs(hs, 0, locations)?;
    let window = Window::new(hs[0].rows, hs[0].cols, cfg);
    Ok(denoise_with_window(hs, locations, &window))
}

pub fn denoise_with_window(hs: &[Heatmap], locations: &[Point2], window: &Window) -> Vec<Heatmap> {
    (0..hs.len())
        .map(|j| {
            let mut m = multiplier_with_window(hs, j, locations, window);
            for (g, h) in m.data.iter_mut().zip(&hs[j].data) {
                *g *= h;
            }
            m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cell_center;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal evaluation over (p, r, k) with direct bilinear reads.
    fn brute_multiplier(hs: &[Heatmap], j: usize, locs: &[Point2], cfg: &ConfigParams) -> Vec<f64> {
        let (rows, cols) = (hs[0].rows(), hs[0].cols());
        let rad = cfg.radius_for(rows, cols) as isize;
        let mut out = vec![0.0; rows * cols];
        for pr in 0..rows {
            for pc in 0..cols {
                let p = cell_center(pr, pc, rows, cols).unwrap();
                let mut total = 0.0;
                for r in 0..hs.len() {
                    if r == j {
                        continue;
                    }
                    let mut best: f64 = 0.0;
                    for dr in -rad..=rad {
                        for dc in -rad..=rad {
                            if dr * dr + dc * dc > rad * rad {
                                continue;
                            }
                            let k = Point2::new(dc as f64 * 2.0 / cols as f64, dr as f64 * 2.0 / rows as f64);
                            let g = (-(k.x * k.x + k.y * k.y) / (2.0 * cfg.sigma_config.powi(2))).exp();
                            let q = Point2::new(
                                p.x + locs[r].x - locs[j].x - k.x,
                                p.y + locs[r].y - locs[j].y - k.y,
                            );
                            best = best.max(g * hs[r].sample(q));
                        }
                    }
                    total += best;
                }
                out[pr * cols + pc] = total / (hs.len() - 1) as f64;
            }
        }
        out
    }

    fn peak_map(n: usize, r: usize, c: usize) -> Heatmap {
        let mut h = Heatmap::zeros(n, n);
        h.data[r * n + c] = 1.0;
        h
    }

    #[test]
    fn blob_values() {
        let c = cell_center(5, 7, 28, 28).unwrap();
        let b = blob(c, 28, 28, 0.08);
        assert_eq!(b.get(5, 7), 1.0);
        let want = (-(1.0f64 / 14.0).powi(2) / (2.0 * 0.0064)).exp();
        assert!((b.get(5, 8) - want).abs() < 1e-12);
        assert!((want - 0.6713).abs() < 1e-4);
        // 12 cells is more than 10 sigma
        assert!(b.get(17, 7) < 1e-21);
    }

    #[test]
    fn consistent_pair_gives_unit_multiplier() {
        let n = 28;
        let l1 = cell_center(10, 10, n, n).unwrap();
        let l2 = cell_center(13, 16, n, n).unwrap();
        // part 2 sits 3 rows and 6 cols after part 1, both in the reference and here
        let hs = vec![peak_map(n, 8, 5), peak_map(n, 11, 11)];
        let m = multiplier(&hs, 1, &[l1, l2], &ConfigParams::default()).unwrap();
        assert!((m.get(11, 11) - 1.0).abs() < 1e-12);
        let g = denoise(&hs, &[l1, l2], &ConfigParams::default()).unwrap();
        assert!((g[1].get(11, 11) - hs[1].get(11, 11)).abs() < 1e-12);
    }

    #[test]
    fn empty_evidence_and_far_peaks() {
        let n = 28;
        let cfg = ConfigParams::default();
        let l1 = cell_center(10, 10, n, n).unwrap();
        let l2 = cell_center(13, 16, n, n).unwrap();
        let hs = vec![Heatmap::zeros(n, n), peak_map(n, 11, 11)];
        let m = multiplier(&hs, 1, &[l1, l2], &cfg).unwrap();
        assert!(m.data().iter().all(|v| *v == 0.0));

        // displaced by 6 extra cells, beyond the 4-cell window
        let hs = vec![peak_map(n, 8, 5), peak_map(n, 11, 17)];
        let m = multiplier(&hs, 1, &[l1, l2], &cfg).unwrap();
        let edge = (-(4.0f64 / 14.0).powi(2) / (2.0 * 0.0064)).exp();
        assert!((edge - 1.7e-3).abs() < 1e-4);
        assert!(m.get(11, 17) <= edge);
        let brute = brute_multiplier(&hs, 1, &[l1, l2], &cfg);
        assert!((brute[11 * n + 17] - m.get(11, 17)).abs() < 1e-12);
    }

    #[test]
    fn default_radius_on_28_grid() {
        assert_eq!(ConfigParams::default().radius_for(28, 28), 4);
        assert_eq!(Window::new(28, 28, &ConfigParams::default()).len(), 49);
    }

    #[test]
    fn optimized_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ConfigParams::default();
        for _ in 0..10 {
            let hs: Vec<Heatmap> = (0..4)
                .map(|_| Heatmap::new(12, 12, (0..144).map(|_| rng.random::<f64>()).collect()).unwrap())
                .collect();
            let locs: Vec<Point2> = (0..4)
                .map(|_| Point2::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)))
                .collect();
            for j in 0..4 {
                let fast = multiplier(&hs, j, &locs, &cfg).unwrap();
                let slow = brute_multiplier(&hs, j, &locs, &cfg);
                for (a, b) in fast.data().iter().zip(&slow) {
                    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn joint_translation_equivariance() {
        let n = 20;
        let cfg = ConfigParams::default();
        let locs = [Point2::new(-0.2, -0.1), Point2::new(0.15, 0.05), Point2::new(0.0, 0.3)];
        let mk = |shift: usize| -> Vec<Heatmap> {
            let spots = [(6, 5), (8, 9), (10, 7)];
            spots
                .iter()
                .map(|&(r, c)| {
                    let mut h = Heatmap::zeros(n, n);
                    h.data[(r + shift) * n + c + shift] = 0.8;
                    h.data[(r + shift) * n + c + shift + 1] = 0.4;
                    h
                })
                .collect()
        };
        let (a, b) = (mk(0), mk(2));
        let ga = denoise(&a, &locs, &cfg).unwrap();
        let gb = denoise(&b, &locs, &cfg).unwrap();
        for (x, y) in ga.iter().zip(&gb) {
            for r in 0..n - 2 {
                for c in 0..n - 2 {
                    assert!((x.get(r, c) - y.get(r + 2, c + 2)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn errors() {
        let cfg = ConfigParams::default();
        let h = Heatmap::zeros(4, 4);
        assert!(multiplier(&[h.clone()], 0, &[Point2::default()], &cfg).is_err());
        assert!(multiplier(&[h.clone(), Heatmap::zeros(5, 4)], 0, &[Point2::default(); 2], &cfg).is_err());
        assert!(multiplier(&[h.clone(), h], 0, &[Point2::default()], &cfg).is_err());
    }

    #[test]
    fn gray8_scaling() {
        let h = Heatmap::new(1, 4, vec![0.0, 1.0, 0.5, 0.2]).unwrap();
        assert_eq!(h.to_gray8(), vec![0, 255, 128, 51]);
    }
}
