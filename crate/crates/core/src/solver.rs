//! Per-scale minimization of the registration objective and the scale sweep.
//!
//! Gradients are hybrid: analytic in the disturbance latents `w`, central
//! finite differences in the warp latents `v` (the backbone is a black box).

use rayon::prelude::*;

use crate::backbone::Backbone;
use crate::energy::{EnergyConfig, LatentParams, Problem};
use crate::error::{Error, Result};
use crate::geometry::{Image, Point2, WarpParams};
use crate::optim::Adam;
use crate::parts::PartModel;

#[derive(Clone, Debug, PartialEq)]
pub struct SolveConfig {
    pub iterations: usize,
    pub step_w: f64,
    pub step_v: f64,
    /// Central-difference step in `v`.
    pub fd_step: f64,
    pub scales: Vec<f64>,
    pub energy: EnergyConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            step_w: 0.05,
            step_v: 0.05,
            fd_step: 1e-3,
            scales: default_scales(),
            energy: EnergyConfig::default(),
        }
    }
}

/// `0.65, 0.70, ..., 1.20`.
pub fn default_scales() -> Vec<f64> {
    scale_range(0.65, 1.20, 0.05)
}

/// Inclusive arithmetic range, each value rounded to 1e-9 to avoid drift.
pub fn scale_range(start: f64, end: f64, step: f64) -> Vec<f64> {
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    (0..count)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect()
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("scale list is empty".into()));
        }
        if self.scales.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("scale list must be strictly increasing".into()));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.25)) {
            return Err(Error::Config("scales must be finite and above 0.25".into()));
        }
        if !(self.fd_step > 0.0 && self.step_v > 0.0 && self.step_w > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        self.energy.validate()
    }
}

/// Result of one fixed-scale solve.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleResult {
    pub base_scale: f64,
    pub loss: f64,
    pub latents: LatentParams,
    /// Best-so-far loss after each evaluated iterate; non-increasing.
    pub trace: Vec<f64>,
}

impl ScaleResult {
    pub fn warp(&self) -> WarpParams {
        self.latents.warp()
    }

    pub fn disturbances(&self) -> Vec<Point2> {
        self.latents.disturbances()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub warp: WarpParams,
    pub disturbances: Vec<Point2>,
    pub base_scale: f64,
    pub loss: f64,
    pub per_scale: Vec<ScaleResult>,
}

/// Minimizes the objective at a fixed base scale from zero latents.
pub fn optimize_scale(problem: &Problem<'_>, base_scale: f64, cfg: &SolveConfig) -> Result<ScaleResult> {
    let n = problem.model.len();
    let mut lp = LatentParams::zeros(n, base_scale);
    let mut adam = Adam::with_rates(
        std::iter::repeat_n(cfg.step_w, 2 * n)
            .chain(std::iter::repeat_n(cfg.step_v, 4))
            .collect(),
    );
    let mut best_loss = f64::INFINITY;
    let mut best = lp.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let non_finite = |iteration| Error::NonFinite {
        scale: base_scale,
        iteration,
    };

    for it in 0..cfg.iterations {
        let (eps, theta) = crate::energy::latent_to_params(&lp);
        let gs = problem.denoised(&theta)?;
        let loss = problem.energy(&gs, &eps)?;
        if !loss.is_finite() {
            return Err(non_finite(it));
        }
        if loss < best_loss {
            best_loss = loss;
            best = lp.clone();
        }
        trace.push(best_loss);
        if it + 1 == cfg.iterations {
            break;
        }

        let mut grad = problem.grad_w(&lp, &gs)?;
        for k in 0..4 {
            let mut plus = lp.clone();
            let mut minus = lp.clone();
            plus.v[k] += cfg.fd_step;
            minus.v[k] -= cfg.fd_step;
            let (fp, fm) = (problem.objective(&plus)?, problem.objective(&minus)?);
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(non_finite(it));
            }
            grad.push((fp - fm) / (2.0 * cfg.fd_step));
        }
        let mut flat: Vec<f64> = lp.w.iter().chain(&lp.v).copied().collect();
        adam.step(&mut flat, &grad);
        lp.w.copy_from_slice(&flat[..2 * n]);
        lp.v.copy_from_slice(&flat[2 * n..]);
    }

    Ok(ScaleResult {
        base_scale,
        loss: best_loss,
        latents: best,
        trace,
    })
}

/// Runs every scale independently and keeps the lowest final loss
/// (ties go to the smaller scale).
pub fn register(u: &Image, model: &PartModel, backbone: &Backbone, cfg: &SolveConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    let problem = Problem::new(u, model, backbone, cfg.energy)?;
    let per_scale: Vec<ScaleResult> = cfg
        .scales
        .par_iter()
        .map(|&s| optimize_scale(&problem, s, cfg))
        .collect::<Result<_>>()?;
    let best = select_best(&per_scale);
    let chosen = &per_scale[best];
    Ok(RegistrationResult {
        warp: chosen.warp(),
        disturbances: chosen.disturbances(),
        base_scale: chosen.base_scale,
        loss: chosen.loss,
        per_scale,
    })
}

fn select_best(results: &[ScaleResult]) -> usize {
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        let b = &results[best];
        if r.loss < b.loss || (r.loss == b.loss && r.base_scale < b.base_scale) {
            best = i;
        }
    }
    best
}
