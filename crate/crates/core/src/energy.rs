//! Registration energy and the map from unconstrained latents to warp
//! parameters and per-part disturbances.
//!
//! With `t(x) = tanh(x)` and `sig(x) = (1 + tanh(x)) / 2`:
//!
//! ```text
//! eps      = t(w) / 4
//! scale    = (s1 - 1/4) + sig(v1) / 2
//! shift_x  = (1 - scale)(2 sig(v2) - 1)
//! shift_y  = (1 - scale)(2 sig(v3) - 1)
//! angle    = t(v4) / 10
//! E        = -sum_n sum_rs (1 + k^n(eps^n))_rs (g^n_rs)^2 + lambda sum_n |eps^n|^2
//! ```

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::geometry::{cell_center_unchecked, Image, Point2, WarpParams};
use crate::heatmap::{blob, denoise_with_window, ConfigParams, Heatmap, Window};
use crate::parts::{part_heatmap, PartModel};

/// `tanh` outputs are kept inside `[-SATURATION, SATURATION]` so the parameter
/// ranges stay open even when `tanh` rounds to 1.
pub const SATURATION: f64 = 1.0 - 1e-12;

#[inline]
fn squash(x: f64) -> f64 {
    x.tanh().clamp(-SATURATION, SATURATION)
}

#[inline]
fn sig(x: f64) -> f64 {
    0.5 * (1.0 + squash(x))
}

/// Unconstrained optimization variables for one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentParams {
    /// Disturbance latents, `(x, y)` interleaved per part.
    pub w: Vec<f64>,
    /// Warp latents.
    pub v: [f64; 4],
    /// Base scale `s1`, fixed for a solve.
    pub base_scale: f64,
}

impl LatentParams {
    pub fn zeros(parts: usize, base_scale: f64) -> Self {
        Self {
            w: vec![0.0; 2 * parts],
            v: [0.0; 4],
            base_scale,
        }
    }

    pub fn parts(&self) -> usize {
        self.w.len() / 2
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.v).all(|x| x.is_finite()) && self.base_scale.is_finite()
    }

    pub fn warp(&self) -> WarpParams {
        let [v1, v2, v3, v4] = self.v;
        let scale = (self.base_scale - 0.25) + 0.5 * sig(v1);
        let span = 1.0 - scale;
        WarpParams::new(
            scale,
            span * (-1.0 + 2.0 * sig(v2)),
            span * (-1.0 + 2.0 * sig(v3)),
            0.1 * squash(v4),
        )
    }

    pub fn disturbances(&self) -> Vec<Point2> {
        self.w
            .chunks_exact(2)
            .map(|xy| Point2::new(0.25 * squash(xy[0]), 0.25 * squash(xy[1])))
            .collect()
    }
}

/// Splits latents into disturbances and warp parameters.
pub fn latent_to_params(lp: &LatentParams) -> (Vec<Point2>, WarpParams) {
    (lp.disturbances(), lp.warp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConfig {
    pub lambda: f64,
    pub heat: ConfigParams,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-6,
            heat: ConfigParams::default(),
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be nonnegative", self.lambda)));
        }
        self.heat.validate()
    }
}

fn check_grids(gs: &[Heatmap], eps: &[Point2], locations: &[Point2]) -> Result<()> {
    if gs.len() != eps.len() || gs.len() != locations.len() {
        return Err(Error::Domain(format!(
            "{} heatmaps, {} disturbances, {} locations",
            gs.len(),
            eps.len(),
            locations.len()
        )));
    }
    if gs.iter().any(|g| !g.same_grid(&gs[0])) {
        return Err(Error::Domain("heatmaps do not share a grid".into()));
    }
    Ok(())
}

/// Registration energy for denoised heatmaps `gs` and disturbances `eps`.
pub fn energy(gs: &[Heatmap], eps: &[Point2], locations: &[Point2], cfg: &EnergyConfig) -> Result<f64> {
    check_grids(gs, eps, locations)?;
    let mut data_term = 0.0;
    for ((g, e), l) in gs.iter().zip(eps).zip(locations) {
        let k = blob(*l + *e, g.rows(), g.cols(), cfg.heat.sigma_blob);
        for (gv, kv) in g.data().iter().zip(k.data()) {
            data_term += (1.0 + kv) * gv * gv;
        }
    }
    let penalty: f64 = eps.iter().map(|e| e.x * e.x + e.y * e.y).sum();
    Ok(-data_term + cfg.lambda * penalty)
}

/// Analytic gradient of the energy in `w`, holding the warp (and so `gs`) fixed.
pub fn grad_w(lp: &LatentParams, gs: &[Heatmap], locations: &[Point2], cfg: &EnergyConfig) -> Result<Vec<f64>> {
    let eps = lp.disturbances();
    check_grids(gs, &eps, locations)?;
    let sigma2 = cfg.heat.sigma_blob * cfg.heat.sigma_blob;
    let inv = 1.0 / (2.0 * sigma2);
    let mut out = Vec::with_capacity(lp.w.len());
    for (n, g) in gs.iter().enumerate() {
        let center = locations[n] + eps[n];
        let (rows, cols) = (g.rows(), g.cols());
        // dE/d eps = -sum g^2 dk/d eps, dk/d eps = k (c - center) / sigma^2
        let (mut gx, mut gy) = (0.0, 0.0);
        for r in 0..rows {
            for c in 0..cols {
                let gv = g.get(r, c);
                if gv == 0.0 {
                    continue;
                }
                let p = cell_center_unchecked(r, c, rows, cols);
                let k = (-p.dist2(&center) * inv).exp();
                let w = gv * gv * k / sigma2;
                gx -= w * (p.x - center.x);
                gy -= w * (p.y - center.y);
            }
        }
        gx += 2.0 * cfg.lambda * eps[n].x;
        gy += 2.0 * cfg.lambda * eps[n].y;
        for (gval, wv) in [gx, gy].into_iter().zip(&lp.w[2 * n..2 * n + 2]) {
            let t = wv.tanh();
            out.push(gval * 0.25 * (1.0 - t * t));
        }
    }
    Ok(out)
}

/// The full objective for one input image: patch extraction, features,
/// part heatmaps, denoising and energy.
pub struct Problem<'a> {
    pub image: &'a Image,
    pub model: &'a PartModel,
    pub backbone: &'a Backbone,
    pub cfg: EnergyConfig,
    window: Window,
}

impl<'a> Problem<'a> {
    pub fn new(image: &'a Image, model: &'a PartModel, backbone: &'a Backbone, cfg: EnergyConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if backbone.channels() != model.backbone.channels() {
            return Err(Error::Config(format!(
                "backbone produces {} channels, model expects {}",
                backbone.channels(),
                model.backbone.channels()
            )));
        }
        let (rows, cols) = model.grid;
        Ok(Self {
            image,
            model,
            backbone,
            cfg,
            window: Window::new(rows, cols, &cfg.heat),
        })
    }

    /// Raw part heatmaps `h^i(u(theta))`.
    pub fn heatmaps(&self, theta: &WarpParams) -> Result<Vec<Heatmap>> {
        let f = self.backbone.patch_features(self.image, theta, self.model.patch_size)?;
        if (f.rows(), f.cols()) != self.model.grid {
            return Err(Error::Config(format!(
                "backbone grid {}x{} differs from model grid {:?}",
                f.rows(),
                f.cols(),
                self.model.grid
            )));
        }
        self.model.descriptors.iter().map(|d| part_heatmap(&f, d)).collect()
    }

    /// Denoised heatmaps `g^i(u(theta))`.
    pub fn denoised(&self, theta: &WarpParams) -> Result<Vec<Heatmap>> {
        let hs = self.heatmaps(theta)?;
        Ok(denoise_with_window(&hs, &self.model.locations, &self.window))
    }

    pub fn energy(&self, gs: &[Heatmap], eps: &[Point2]) -> Result<f64> {
        energy(gs, eps, &self.model.locations, &self.cfg)
    }

    pub fn objective(&self, lp: &LatentParams) -> Result<f64> {
        let (eps, theta) = latent_to_params(lp);
        let gs = self.denoised(&theta)?;
        self.energy(&gs, &eps)
    }

    pub fn grad_w(&self, lp: &LatentParams, gs: &[Heatmap]) -> Result<Vec<f64>> {
        grad_w(lp, gs, &self.model.locations, &self.cfg)
    }
}

/// Convenience wrapper building the backbone from the model's spec.
pub fn objective(lp: &LatentParams, u: &Image, model: &PartModel, cfg: &EnergyConfig) -> Result<f64> {
    let backbone = Backbone::from_spec(&model.backbone)?;
    Problem::new(u, model, &backbone, *cfg)?.objective(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cell_center;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_energy(gs: &[Heatmap], eps: &[Point2], locs: &[Point2], lambda: f64, sigma: f64) -> f64 {
        let mut e = 0.0;
        for n in 0..gs.len() {
            let (rows, cols) = (gs[n].rows(), gs[n].cols());
            for r in 0..rows {
                for c in 0..cols {
                    let x = -1.0 + (2 * c + 1) as f64 / cols as f64;
                    let y = -1.0 + (2 * r + 1) as f64 / rows as f64;
                    let dx = x - locs[n].x - eps[n].x;
                    let dy = y - locs[n].y - eps[n].y;
                    let k = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    e -= (1.0 + k) * gs[n].get(r, c).powi(2);
                }
            }
            e += lambda * (eps[n].x.powi(2) + eps[n].y.powi(2));
        }
        e
    }

    #[test]
    fn zero_latents_map_to_base_scale() {
        let (eps, th) = latent_to_params(&LatentParams::zeros(3, 0.8));
        assert_eq!(th, WarpParams::new(0.8, 0.0, 0.0, 0.0));
        assert!(eps.iter().all(|e| *e == Point2::new(0.0, 0.0)));
    }

    #[test]
    fn latent_limits() {
        let mut lp = LatentParams::zeros(1, 0.8);
        lp.v[0] = 50.0;
        assert!((lp.warp().scale - 1.05).abs() < 1e-9 && lp.warp().scale < 1.05);
        lp.v[0] = -50.0;
        assert!((lp.warp().scale - 0.55).abs() < 1e-9 && lp.warp().scale > 0.55);
        lp.v[3] = 1e3;
        assert!((lp.warp().angle - 0.1).abs() < 1e-9 && lp.warp().angle < 0.1);
        lp.w[0] = -1e3;
        assert!(lp.disturbances()[0].x > -0.25);
    }

    #[test]
    fn energy_examples() {
        let locs = [Point2::new(0.1, 0.2), Point2::new(-0.3, 0.0)];
        let cfg = EnergyConfig::default();
        let zeros = vec![Heatmap::zeros(4, 4), Heatmap::zeros(4, 4)];
        let eps = [Point2::default(); 2];
        assert_eq!(energy(&zeros, &eps, &locs, &cfg).unwrap(), 0.0);

        let mut d = vec![0.0; 16];
        d[5] = 0.7;
        let g = vec![Heatmap::new(4, 4, d).unwrap()];
        let k0 = blob(locs[0], 4, 4, 0.08).get(1, 1);
        let e = energy(&g, &eps[..1], &locs[..1], &cfg).unwrap();
        assert!((e + (1.0 + k0) * 0.49).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gs: Vec<Heatmap> = (0..2)
            .map(|_| Heatmap::new(4, 4, (0..16).map(|_| rng.random()).collect()).unwrap())
            .collect();
        let eps = [Point2::new(0.1, -0.05), Point2::new(-0.2, 0.15)];
        let locs = [cell_center(1, 2, 4, 4).unwrap(), Point2::new(-0.41, 0.33)];
        let want = brute_energy(&gs, &eps, &locs, 1e-6, 0.08);
        assert!((energy(&gs, &eps, &locs, &cfg).unwrap() - want).abs() < 1e-12);
        assert!(energy(&gs, &eps[..1], &locs, &cfg).is_err());
    }

    #[test]
    fn grad_w_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = EnergyConfig {
            lambda: 0.3,
            ..EnergyConfig::default()
        };
        for _ in 0..10 {
            let gs: Vec<Heatmap> = (0..3)
                .map(|_| Heatmap::new(8, 8, (0..64).map(|_| rng.random()).collect()).unwrap())
                .collect();
            let locs: Vec<Point2> = (0..3)
                .map(|_| Point2::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)))
                .collect();
            let mut lp = LatentParams::zeros(3, 1.0);
            lp.w.iter_mut().for_each(|w| *w = rng.random_range(-1.5..1.5));
            let g = grad_w(&lp, &gs, &locs, &cfg).unwrap();
            let h = 1e-4;
            for i in 0..lp.w.len() {
                let mut p = lp.clone();
                let mut m = lp.clone();
                p.w[i] += h;
                m.w[i] -= h;
                let fd = (energy(&gs, &p.disturbances(), &locs, &cfg).unwrap()
                    - energy(&gs, &m.disturbances(), &locs, &cfg).unwrap())
                    / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(rel <= 1e-4, "{} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn grad_w_vanishes_when_empty_or_saturated() {
        let gs = vec![Heatmap::zeros(6, 6); 2];
        let locs = [Point2::new(0.1, 0.1), Point2::new(-0.2, 0.3)];
        let lp = LatentParams::zeros(2, 1.0);
        assert!(grad_w(&lp, &gs, &locs, &EnergyConfig::default()).unwrap().iter().all(|g| *g == 0.0));

        let full = vec![Heatmap::new(6, 6, vec![0.9; 36]).unwrap(); 2];
        let mut lp = LatentParams::zeros(2, 1.0);
        lp.w[0] = 40.0;
        let g = grad_w(&lp, &full, &locs, &EnergyConfig::default()).unwrap();
        assert!(g[0].abs() < 1e-30);
    }

    #[test]
    fn increasing_any_g_entry_lowers_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let locs = [Point2::new(0.0, 0.0)];
        let eps = [Point2::new(0.05, 0.0)];
        let base: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..0.9)).collect();
        let e0 = energy(&[Heatmap::new(5, 5, base.clone()).unwrap()], &eps, &locs, &EnergyConfig::default()).unwrap();
        for i in 0..25 {
            let mut b = base.clone();
            b[i] += 0.05;
            let e1 = energy(&[Heatmap::new(5, 5, b).unwrap()], &eps, &locs, &EnergyConfig::default()).unwrap();
            assert!(e1 < e0);
        }
    }
}
