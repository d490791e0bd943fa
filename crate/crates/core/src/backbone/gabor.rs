//! Analytic Gabor filter bank used as the built-in dense feature extractor.
//!
//! Each kernel's response is split into its positive and negative rectified
//! parts, so a bank of `K` kernels yields `2K` nonnegative channels. The
//! convolutions run through zero-padded FFTs; two real kernels share one
//! complex inverse transform.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use rustfft::num_complex::{Complex, Complex32, Complex64};
use rustfft::{Fft, FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Image;

/// Locations whose pooled response norm falls below this are treated as empty.
/// It sits well above the single-precision transform noise.
pub const ZERO_RESPONSE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    pub orientations: usize,
    pub wavelengths: Vec<f64>,
    /// Total downsampling of the pooled output; a power of two.
    pub pooling: usize,
}

impl Default for GaborParams {
    fn default() -> Self {
        Self {
            orientations: 8,
            wavelengths: vec![4.0, 8.0],
            pooling: 8,
        }
    }
}

impl GaborParams {
    pub fn kernel_count(&self) -> usize {
        self.orientations * self.wavelengths.len()
    }

    pub fn channels(&self) -> usize {
        2 * self.kernel_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.orientations == 0 || self.wavelengths.is_empty() {
            return Err(Error::Config("filter bank needs orientations and wavelengths".into()));
        }
        if let Some(w) = self.wavelengths.iter().find(|w| !(**w >= 2.0)) {
            return Err(Error::Config(format!("wavelength {w} is below 2 px")));
        }
        if !self.pooling.is_power_of_two() {
            return Err(Error::Config(format!(
                "pooling factor {} is not a power of two",
                self.pooling
            )));
        }
        Ok(())
    }

    /// Kernels in channel order: wavelength-major, then orientation `k * pi / orientations`.
    pub fn kernels(&self) -> Vec<Kernel> {
        let mut out = Vec::with_capacity(self.kernel_count());
        for &wl in &self.wavelengths {
            for k in 0..self.orientations {
                out.push(gabor_kernel(k as f64 * PI / self.orientations as f64, wl));
            }
        }
        out
    }
}

/// A square kernel of odd side `2 * radius + 1`, row-major, centered.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub radius: usize,
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Tap at offset `(dy, dx)` from the center.
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        self.taps[((dy + r) * self.side() as isize + dx + r) as usize]
    }
}

/// Cosine-phase Gabor kernel with envelope `0.5 * wavelength`, aspect 0.5,
/// support radius `ceil(2.5 * sigma)`, made zero-mean.
pub fn gabor_kernel(orientation: f64, wavelength: f64) -> Kernel {
    let sigma = 0.5 * wavelength;
    let gamma = 0.5;
    let radius = (2.5 * sigma).ceil() as usize;
    let side = 2 * radius + 1;
    let (sin, cos) = orientation.sin_cos();
    let mut taps = Vec::with_capacity(side * side);
    for iy in 0..side {
        let y = iy as f64 - radius as f64;
        for ix in 0..side {
            let x = ix as f64 - radius as f64;
            let xr = x * cos + y * sin;
            let yr = -x * sin + y * cos;
            let env = (-(xr * xr + gamma * gamma * yr * yr) / (2.0 * sigma * sigma)).exp();
            taps.push(env * (2.0 * PI * xr / wavelength).cos());
        }
    }
    let mean = taps.iter().sum::<f64>() / taps.len() as f64;
    taps.iter_mut().for_each(|t| *t -= mean);
    Kernel { radius, taps }
}

/// Precomputed FFT plans and kernel spectra for one input size.
struct SpectralPlan {
    n: usize,
    fwd: Arc<dyn Fft<f32>>,
    inv: Arc<dyn Fft<f32>>,
    /// Transposed spectra of kernel pairs `k_a + i k_b`, scaled by `1 / n^2`.
    pair_spectra: Vec<Vec<Complex32>>,
}

/// Filter bank with a per-size cache of FFT plans.
pub struct GaborBank {
    params: GaborParams,
    kernels: Vec<Kernel>,
    plans: Mutex<HashMap<(usize, usize), Arc<SpectralPlan>>>,
}

impl std::fmt::Debug for GaborBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaborBank").field("params", &self.params).finish()
    }
}

impl GaborBank {
    pub fn new(params: GaborParams) -> Result<Self> {
        params.validate()?;
        let kernels = params.kernels();
        Ok(Self {
            params,
            kernels,
            plans: Mutex::new(HashMap::new()),
        })
    }

    pub fn params(&self) -> &GaborParams {
        &self.params
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    fn plan(&self, h: usize, w: usize) -> Arc<SpectralPlan> {
        let mut plans = self.plans.lock().unwrap_or_else(|e| e.into_inner());
        plans
            .entry((h, w))
            .or_insert_with(|| Arc::new(self.build_plan(h, w)))
            .clone()
    }

    fn build_plan(&self, h: usize, w: usize) -> SpectralPlan {
        let rmax = self.kernels.iter().map(|k| k.radius).max().unwrap_or(0);
        let n = fast_len(h.max(w) + rmax);
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        
        let mut pair_spectra = Vec::new();
        for pair in self.kernels.chunks(2) {
            let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
            for (part, k) in pair.iter().enumerate() {
                let r = k.radius as isize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let iy = dy.rem_euclid(n as isize) as usize;
                        let ix = dx.rem_euclid(n as isize) as usize;
                        let v = k.at(dy, dx);
                        if part == 0 {
                            buf[iy * n + ix].re += v;
                        } else {
                            buf[iy * n + ix].im += v;
                        }
                    }
                }
            }
            fft2_transposed(&mut buf, n, n, fwd.as_ref());
            let scale = 1.0 / (n * n) as f64;
            pair_spectra.push(buf.iter().map(|z| Complex32::new((z.re * scale) as f32, (z.im * scale) as f32)).collect());
        }
        let mut planner = FftPlanner::<f32>::new();
        SpectralPlan {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            pair_spectra,
        }
    }

    /// Runs the convolutions pair by pair. `visit(pair, t, n)` receives an
    /// `h x n` buffer whose real and imaginary parts hold the responses of
    /// kernels `2 * pair` and `2 * pair + 1` in columns `0..w`.
    fn convolve_pairs(&self, image: &Image, mut visit: impl FnMut(usize, &[Complex32], usize)) {
        const BLOCK: usize = 16;
        let (h, w) = (image.height(), image.width());
        let plan = self.plan(h, w);
        let n = plan.n;
        let zero = Complex32::new(0.0, 0.0);
        let mut spec = vec![zero; n * n];
        for r in 0..h {
            for c in 0..w {
                spec[r * n + c].re = image.get(r, c) as f32;
            }
        }
        fft2_transposed(&mut spec, n, h, plan.fwd.as_ref());
        let mut scratch = vec![zero; plan.inv.get_inplace_scratch_len()];
        let mut block = vec![zero; BLOCK * n];
        let mut t = vec![zero; h * n];
        for (pi, ks) in plan.pair_spectra.iter().enumerate() {
            // Inverse along y, one block of x-frequencies at a time, then
            // scatter into row-major order for the inverse along x.
            for kx0 in (0..n).step_by(BLOCK) {
                let rows = BLOCK.min(n - kx0);
                let src = &spec[kx0 * n..(kx0 + rows) * n];
                let ker = &ks[kx0 * n..(kx0 + rows) * n];
                complex_mul(&mut block[..rows * n], src, ker);
                plan.inv.process_with_scratch(&mut block[..rows * n], &mut scratch);
                for y in 0..h {
                    let dst = &mut t[y * n + kx0..y * n + kx0 + rows];
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = block[j * n + y];
                    }
                }
            }
            plan.inv.process_with_scratch(&mut t, &mut scratch);
            visit(pi, &t, n);
        }
    }

    /// Raw convolution responses, one `h x w` plane per kernel.
    pub fn responses(&self, image: &Image) -> Vec<Vec<f64>> {
        let (h, w) = (image.height(), image.width());
        let count = self.kernels.len();
        let mut planes = Vec::with_capacity(count);
        self.convolve_pairs(image, |pi, t, n| {
            let rows = t.chunks(n).map(|row| &row[..w]);
            planes.push(rows.clone().flatten().map(|z| z.re as f64).collect());
            if 2 * pi + 1 < count {
                planes.push(rows.flatten().map(|z| z.im as f64).collect());
            }
            debug_assert_eq!(t.len(), h * n);
        });
        planes
    }

    /// Rectified, pooled and per-location normalized features.
    pub fn extract(&self, image: &Image) -> Result<super::FeatureMap> {
        let p = self.params.pooling;
        let (h, w) = (image.height(), image.width());
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible by the pooling factor {p}"
            )));
        }
        let (rows, cols) = (h / p, w / p);
        let channels = self.params.channels();
        let count = self.kernels.len();
        let mut data = vec![0.0; rows * cols * channels];
        self.convolve_pairs(image, |pi, t, n| {
            let chans = if 2 * pi + 1 < count { 2 } else { 1 };
            // interleaved (re, im) per column, summed over the current band of rows
            let mut pos = vec![0.0f32; 2 * w];
            let mut neg = vec![0.0f32; 2 * w];
            for y in 0..h {
                let row = as_floats(&t[y * n..y * n + w]);
                for ((pv, nv), &v) in pos.iter_mut().zip(neg.iter_mut()).zip(row) {
                    *pv += if v > 0.0 { v } else { 0.0 };
                    *nv += if v < 0.0 { -v } else { 0.0 };
                }
                if (y + 1) % p != 0 {
                    continue;
                }
                let out_row = &mut data[(y / p) * cols * channels..(y / p + 1) * cols * channels];
                for (cell, (pb, nb)) in pos.chunks(2 * p).zip(neg.chunks(2 * p)).enumerate() {
                    let mut sum = [0.0f32; 4];
                    for (pz, nz) in pb.chunks(2).zip(nb.chunks(2)) {
                        sum[0] += pz[0];
                        sum[1] += nz[0];
                        sum[2] += pz[1];
                        sum[3] += nz[1];
                    }
                    let o = &mut out_row[cell * channels + 4 * pi..];
                    for k in 0..2 * chans {
                        o[k] += sum[k] as f64;
                    }
                }
                pos.iter_mut().for_each(|v| *v = 0.0);
                neg.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let inv_area = 1.0 / (p * p) as f64;
        data.iter_mut().for_each(|v| *v *= inv_area);
        super::FeatureMap::normalized(rows, cols, channels, data, ZERO_RESPONSE)
    }
}
#[cfg(test)]
/// Repeated 2x2 average pooling until the grid shrinks by `factor`.
fn pool_to(src: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let mut cur = src.to_vec();
    let (mut ch, mut cw) = (h, w);
    let mut f = factor;
    while f > 1 {
        let (nh, nw) = (ch / 2, cw / 2);
        let mut next = Vec::with_capacity(nh * nw);
        for r in 0..nh {
            let a = &cur[2 * r * cw..];
            let b = &cur[(2 * r + 1) * cw..];
            for c in 0..nw {
                next.push(0.25 * ((a[2 * c] + a[2 * c + 1]) + (b[2 * c] + b[2 * c + 1])));
            }
        }
        cur = next;
        ch = nh;
        cw = nw;
        f /= 2;
    }
    cur
}

fn as_floats(z: &[Complex32]) -> &[f32] {
    // SAFETY: `Complex<f32>` is `repr(C)` with fields `re, im`, so a slice of
    // `len` values is `2 * len` contiguous, aligned `f32`s.
    unsafe { std::slice::from_raw_parts(z.as_ptr().cast::<f32>(), 2 * z.len()) }
}

fn complex_mul(out: &mut [Complex32], a: &[Complex32], b: &[Complex32]) {
    // Written over plain lanes so it vectorizes.
    let (a, b) = (as_floats(a), as_floats(b));
    let out = as_floats_mut(out);
    for ((o, x), y) in out.chunks_exact_mut(2).zip(a.chunks_exact(2)).zip(b.chunks_exact(2)) {
        o[0] = x[0] * y[0] - x[1] * y[1];
        o[1] = x[0] * y[1] + x[1] * y[0];
    }
}

fn as_floats_mut(z: &mut [Complex32]) -> &mut [f32] {
    // SAFETY: as in `as_floats`.
    unsafe { std::slice::from_raw_parts_mut(z.as_mut_ptr().cast::<f32>(), 2 * z.len()) }
}

/// Smallest length `>= min` whose only prime factors are 2, 3 and 5.
fn fast_len(min: usize) -> usize {
    (min.max(1)..)
        .find(|&k| {
            let mut k = k;
            for p in [2, 3, 5] {
                while k % p == 0 {
                    k /= p;
                }
            }
            k == 1
        })
        .unwrap()
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], n: usize) {
    const B: usize = 16;
    for rb in (0..n).step_by(B) {
        for cb in (0..n).step_by(B) {
            for r in rb..(rb + B).min(n) {
                for c in cb..(cb + B).min(n) {
                    dst[c * n + r] = src[r * n + c];
                }
            }
        }
    }
}

/// Forward 2D FFT of an `n x n` buffer whose rows at and beyond `live_rows`
/// are zero. Leaves the spectrum transposed.
fn fft2_transposed<T: FftNum>(buf: &mut [Complex<T>], n: usize, live_rows: usize, fft: &dyn Fft<T>) {
    fft.process(&mut buf[..live_rows * n]);
    let mut t = vec![Complex::new(T::zero(), T::zero()); n * n];
    transpose(buf, &mut t, n);
    fft.process(&mut t);
    buf.copy_from_slice(&t);
}
