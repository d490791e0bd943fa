//! Dense feature maps with unit-norm (or empty) locations.
//!
//! Features come either from the built-in [`gabor`] bank or from a tensor
//! file written by an external exporter ([`pbrf`]).

pub mod gabor;
pub mod pbrf;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample_channels, in_grid, Affine2, Image, Point2, Stencil, WarpParams};

pub use gabor::{GaborBank, GaborParams};
pub use pbrf::RawTensor;

/// Interpolated descriptors with a norm below this are treated as empty.
pub const DESCRIPTOR_EPS: f64 = 1e-12;

/// `rows x cols x channels` tensor, channel innermost, every location of unit
/// or zero L2 norm, all entries nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    /// Normalizes each location of a raw nonnegative tensor. Locations whose
    /// norm is below `zero_norm` become zero vectors.
    pub fn normalized(
        rows: usize,
        cols: usize,
        channels: usize,
        mut data: Vec<f64>,
        zero_norm: f64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::Domain("feature map dimensions must be positive".into()));
        }
        if data.len() != rows * cols * channels {
            return Err(Error::Domain(format!(
                "feature data has {} values, expected {}",
                data.len(),
                rows * cols * channels
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(format!(
                "feature value {} at index {i} is negative or non-finite",
                data[i]
            )));
        }
        for cell in data.chunks_exact_mut(channels) {
            let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || norm < zero_norm {
                cell.iter_mut().for_each(|v| *v = 0.0);
            } else {
                cell.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(Self {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn from_raw(raw: &RawTensor) -> Result<Self> {
        let data = raw.values.iter().map(|&v| v as f64).collect();
        Self::normalized(raw.rows, raw.cols, raw.channels, data, 0.0)
    }

    pub fn to_raw(&self) -> RawTensor {
        RawTensor {
            rows: self.rows,
            cols: self.cols,
            channels: self.channels,
            values: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Sum of all location vectors.
    pub fn channel_sums(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.channels];
        for cell in self.data.chunks_exact(self.channels) {
            for (a, v) in acc.iter_mut().zip(cell) {
                *a += v;
            }
        }
        acc
    }

    fn hull_contains(&self, p: Point2) -> bool {
        let hx = 1.0 - 1.0 / self.cols as f64;
        let hy = 1.0 - 1.0 / self.rows as f64;
        p.is_finite() && p.x.abs() <= hx + 1e-12 && p.y.abs() <= hy + 1e-12
    }

    /// Unnormalized bilinear read of all channels.
    pub fn interpolate(&self, p: Point2) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        bilinear_sample_channels(&self.data, self.rows, self.cols, self.channels, p, &mut out);
        out
    }

    /// Bilinear read together with its partial derivatives in `x` and `y`.
    pub(crate) fn interpolate_with_grad(&self, p: Point2) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let st = Stencil::at(p, self.rows, self.cols);
        let read = |r: isize, s: isize| in_grid(r, s, self.rows, self.cols).map(|i| &self.data[i * c..(i + 1) * c]);
        let (v00, v01, v10, v11) = (
            read(st.r0, st.c0),
            read(st.r0, st.c0 + 1),
            read(st.r0 + 1, st.c0),
            read(st.r0 + 1, st.c0 + 1),
        );
        let get = |v: Option<&[f64]>, k: usize| v.map_or(0.0, |s| s[k]);
        let (fr, fc) = (st.fr, st.fc);
        let dcol_dx = self.cols as f64 * 0.5;
        let drow_dy = self.rows as f64 * 0.5;
        let mut val = vec![0.0; c];
        let mut gx = vec![0.0; c];
        let mut gy = vec![0.0; c];
        for k in 0..c {
            let (a, b, d, e) = (get(v00, k), get(v01, k), get(v10, k), get(v11, k));
            val[k] = (1.0 - fr) * ((1.0 - fc) * a + fc * b) + fr * ((1.0 - fc) * d + fc * e);
            gx[k] = ((1.0 - fr) * (b - a) + fr * (e - d)) * dcol_dx;
            gy[k] = ((1.0 - fc) * (d - a) + fc * (e - b)) * drow_dy;
        }
        (val, gx, gy)
    }

    /// Resamples the map through an affine warp onto a new grid, then renormalizes.
    pub fn warped(&self, a: &Affine2, rows: usize, cols: usize) -> Result<FeatureMap> {
        let c = self.channels;
        let mut data = vec![0.0; rows * cols * c];
        for r in 0..rows {
            for s in 0..cols {
                let q = a.apply(crate::geometry::cell_center_unchecked(r, s, rows, cols));
                let i = (r * cols + s) * c;
                bilinear_sample_channels(&self.data, self.rows, self.cols, c, q, &mut data[i..i + c]);
            }
        }
        FeatureMap::normalized(rows, cols, c, data, DESCRIPTOR_EPS)
    }
}

/// Unit (or zero) descriptor of one part.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

/// Interpolates `features` at `p` and normalizes the result.
pub fn descriptor_at(features: &FeatureMap, p: Point2) -> Result<Descriptor> {
    if !features.hull_contains(p) {
        return Err(Error::Domain(format!(
            "descriptor location ({}, {}) outside the cell-center hull of a {}x{} grid",
            p.x, p.y, features.rows, features.cols
        )));
    }
    let mut v = features.interpolate(p);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < DESCRIPTOR_EPS {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(Descriptor(v))
}

/// Which feature extractor a model was built with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneSpec {
    BuiltinGabor(GaborParams),
    FeatureFile {
        path: PathBuf,
        rows: usize,
        cols: usize,
        channels: usize,
    },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::BuiltinGabor(GaborParams::default())
    }
}

impl BackboneSpec {
    pub fn channels(&self) -> usize {
        match self {
            BackboneSpec::BuiltinGabor(p) => p.channels(),
            BackboneSpec::FeatureFile { channels, .. } => *channels,
        }
    }

    /// Feature grid produced for a square patch of side `patch`.
    pub fn grid(&self, patch: usize) -> Result<(usize, usize)> {
        match self {
            BackboneSpec::BuiltinGabor(p) => {
                if patch % p.pooling != 0 {
                    return Err(Error::Config(format!(
                        "pooling factor {} does not divide patch size {patch}",
                        p.pooling
                    )));
                }
                Ok((patch / p.pooling, patch / p.pooling))
            }
            BackboneSpec::FeatureFile { rows, cols, .. } => Ok((*rows, *cols)),
        }
    }
}

/// A ready-to-run feature extractor.
#[derive(Debug)]
pub enum Backbone {
    Gabor(GaborBank),
    /// Features of the full input image, loaded from disk. Patches are
    /// resampled from this tensor instead of being re-extracted.
    Precomputed(FeatureMap),
}

impl Backbone {
    pub fn from_spec(spec: &BackboneSpec) -> Result<Self> {
        match spec {
            BackboneSpec::BuiltinGabor(p) => Ok(Backbone::Gabor(GaborBank::new(p.clone())?)),
            BackboneSpec::FeatureFile {
                path,
                rows,
                cols,
                channels,
            } => {
                let fm = load_features(path)?;
                if (fm.rows, fm.cols, fm.channels) != (*rows, *cols, *channels) {
                    return Err(Error::Config(format!(
                        "feature file {} has dims {}x{}x{}, expected {rows}x{cols}x{channels}",
                        path.display(),
                        fm.rows,
                        fm.cols,
                        fm.channels
                    )));
                }
                Ok(Backbone::Precomputed(fm))
            }
        }
    }

    pub fn builtin() -> Self {
        Backbone::Gabor(GaborBank::new(GaborParams::default()).expect("default bank is valid"))
    }

    pub fn channels(&self) -> usize {
        match self {
            Backbone::Gabor(b) => b.params().channels(),
            Backbone::Precomputed(f) => f.channels,
        }
    }

    /// Features of a whole image.
    pub fn extract_features(&self, image: &Image) -> Result<FeatureMap> {
        match self {
            Backbone::Gabor(bank) => bank.extract(image),
            Backbone::Precomputed(f) => Ok(f.clone()),
        }
    }

    /// Features of the patch `u(theta)` of side `patch`.
    pub fn patch_features(&self, u: &Image, theta: &WarpParams, patch: usize) -> Result<FeatureMap> {
        match self {
            Backbone::Gabor(bank) => {
                let p = crate::geometry::warp_extract(u, theta, patch)?;
                bank.extract(&p)
            }
            Backbone::Precomputed(f) => {
                let a = crate::geometry::affine_matrix(theta)?;
                f.warped(&a, f.rows, f.cols)
            }
        }
    }
}

/// Convenience wrapper: built-in or file features of one image.
pub fn extract_features(image: &Image, spec: &BackboneSpec) -> Result<FeatureMap> {
    Backbone::from_spec(spec)?.extract_features(image)
}

pub fn store_features(path: &Path, raw: &RawTensor) -> Result<()> {
    pbrf::write_file(path, raw)
}

/// Loads a tensor file and normalizes each location.
pub fn load_features(path: &Path) -> Result<FeatureMap> {
    FeatureMap::from_raw(&pbrf::read_file(path)?)
}
