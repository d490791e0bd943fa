//! Part selection: heatmaps against reference descriptors and the sparsity
//! objective used to place the parts on the reference image.

use rayon::prelude::*;

use crate::backbone::{descriptor_at, Backbone, BackboneSpec, Descriptor, FeatureMap, DESCRIPTOR_EPS};
use crate::error::{Error, Result};
use crate::geometry::{Image, Point2};
use crate::heatmap::Heatmap;
use crate::optim::Adam;

/// Inner products within this distance of 1 are reported as exactly 1.
const UNIT_SNAP: f64 = 1e-12;

/// Frozen parts learned on a reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct PartModel {
    pub locations: Vec<Point2>,
    pub descriptors: Vec<Descriptor>,
    pub backbone: BackboneSpec,
    /// Feature grid `(rows, cols)` the descriptors were read from.
    pub grid: (usize, usize),
    /// Side of the square patch fed to the backbone.
    pub patch_size: usize,
}

impl PartModel {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.locations.len();
        if n < 2 {
            return Err(Error::Domain(format!("a part model needs at least 2 parts, got {n}")));
        }
        if self.descriptors.len() != n {
            return Err(Error::Domain(format!(
                "{} descriptors for {n} locations",
                self.descriptors.len()
            )));
        }
        let (rows, cols) = self.grid;
        let (hx, hy) = (1.0 - 1.0 / cols as f64, 1.0 - 1.0 / rows as f64);
        for (i, p) in self.locations.iter().enumerate() {
            if !p.is_finite() || p.x.abs() > hx || p.y.abs() > hy {
                return Err(Error::Domain(format!("part {i} location {p:?} outside the grid hull")));
            }
        }
        let channels = self.backbone.channels();
        for (i, d) in self.descriptors.iter().enumerate() {
            let norm = d.norm();
            if d.values().len() != channels {
                return Err(Error::Domain(format!("part {i} descriptor has wrong length")));
            }
            if !(d.is_zero() || (norm - 1.0).abs() < 1e-9) || d.values().iter().any(|v| *v < 0.0) {
                return Err(Error::Domain(format!("part {i} descriptor is not a nonnegative unit vector")));
            }
        }
        Ok(())
    }
}

/// Heatmap of `<F[r, s], d>`, clamped to `[0, 1]`.
pub fn part_heatmap(features: &FeatureMap, d: &Descriptor) -> Result<Heatmap> {
    let c = features.channels();
    if d.values().len() != c {
        return Err(Error::Domain(format!(
            "descriptor has {} channels, feature map has {c}",
            d.values().len()
        )));
    }
    let data = features
        .data()
        .chunks_exact(c)
        .map(|cell| unit_dot(cell, d.values()))
        .collect();
    Heatmap::new(features.rows(), features.cols(), data)
}

#[inline]
fn unit_dot(a: &[f64], b: &[f64]) -> f64 {
    let v: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    if v >= 1.0 - UNIT_SNAP {
        1.0
    } else {
        v.max(0.0)
    }
}

/// `sum_u sum_i |h^i(u)|_1 + lambda * (1 - max h^i(u))`, indexed `[image][part]`.
pub fn selection_loss(heatmaps: &[Vec<Heatmap>], lambda: f64) -> f64 {
    heatmaps
        .iter()
        .map(|per_part| {
            per_part
                .iter()
                .map(|h| h.l1() + lambda * (1.0 - h.max()))
                .sum::<f64>()
        })
        .sum()
}

/// Loss and analytic gradient of the selection objective with respect to the
/// part locations. The max term uses the first row-major argmax.
pub fn selection_loss_grad(
    reference: &FeatureMap,
    dataset: &[FeatureMap],
    locations: &[Point2],
    lambda: f64,
) -> Result<(f64, Vec<Point2>)> {
    let sums: Vec<Vec<f64>> = dataset.iter().map(FeatureMap::channel_sums).collect();
    selection_terms(reference, dataset, &sums, locations, lambda)
}

pub fn selection_grad(
    reference: &FeatureMap,
    dataset: &[FeatureMap],
    locations: &[Point2],
    lambda: f64,
) -> Result<Vec<Point2>> {
    selection_loss_grad(reference, dataset, locations, lambda).map(|(_, g)| g)
}

fn selection_terms(
    reference: &FeatureMap,
    dataset: &[FeatureMap],
    sums: &[Vec<f64>],
    locations: &[Point2],
    lambda: f64,
) -> Result<(f64, Vec<Point2>)> {
    let c = reference.channels();
    if let Some(f) = dataset.iter().find(|f| f.channels() != c) {
        return Err(Error::Domain(format!(
            "dataset feature map has {} channels, reference has {c}",
            f.channels()
        )));
    }
    let per_part: Vec<(f64, Point2)> = locations
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            let (q, qx, qy) = reference.interpolate_with_grad(p);
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < DESCRIPTOR_EPS {
                return Err(Error::DegenerateDescriptor { part: i });
            }
            let d = Descriptor(q.iter().map(|v| v / norm).collect());
            // dL/dd accumulated over the dataset in index order
            let mut gd = vec![0.0; c];
            let mut loss = 0.0;
            for (f, s) in dataset.iter().zip(sums) {
                let h = part_heatmap(f, &d)?;
                let am = h.argmax();
                loss += h.l1() + lambda * (1.0 - h.data()[am]);
                let peak = &f.data()[am * c..(am + 1) * c];
                for k in 0..c {
                    gd[k] += s[k] - lambda * peak[k];
                }
            }
            // through d = q / |q|
            let proj: f64 = gd.iter().zip(d.values()).map(|(a, b)| a * b).sum();
            let gq: Vec<f64> = gd
                .iter()
                .zip(d.values())
                .map(|(g, dv)| (g - proj * dv) / norm)
                .collect();
            let gx: f64 = gq.iter().zip(&qx).map(|(a, b)| a * b).sum();
            let gy: f64 = gq.iter().zip(&qy).map(|(a, b)| a * b).sum();
            Ok((loss, Point2::new(gx, gy)))
        })
        .collect::<Result<_>>()?;
    let loss = per_part.iter().map(|(l, _)| l).sum();
    Ok((loss, per_part.into_iter().map(|(_, g)| g).collect()))
}

/// Phase-one settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectConfig {
    pub parts: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub step: f64,
    /// Locations are projected into `[-clamp, clamp]^2` after every step.
    pub clamp: f64,
    pub patch_size: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            parts: 9,
            lambda: 0.1,
            iterations: 200,
            step: 0.01,
            clamp: 0.95,
            patch_size: 224,
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be nonnegative", self.lambda)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.parts < 2 {
            return Err(Error::Config("at least 2 parts are required".into()));
        }
        if !(self.step > 0.0) || !(self.clamp > 0.0 && self.clamp < 1.0) {
            return Err(Error::Config("step must be positive and clamp in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Initial part locations on a regular grid spanning `[-0.5, 0.5]^2`.
///
/// Nine parts give the 3x3 grid `(-0.5, -0.5) + r (0.5, 0) + s (0, 0.5)`;
/// other counts use the smallest square grid with enough points, row-major.
pub fn initial_locations(parts: usize) -> Vec<Point2> {
    let side = (parts as f64).sqrt().ceil().max(2.0) as usize;
    let step = 1.0 / (side - 1) as f64;
    let mut out = Vec::with_capacity(parts);
    'outer: for s in 0..side {
        for r in 0..side {
            if out.len() == parts {
                break 'outer;
            }
            out.push(Point2::new(-0.5 + r as f64 * step, -0.5 + s as f64 * step));
        }
    }
    out
}

/// Outcome of phase one along with its loss trace.
#[derive(Clone, Debug)]
pub struct Selection {
    pub model: PartModel,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Optimizes part locations over a dataset and freezes them with descriptors
/// read from the reference.
pub fn select_parts(
    reference: &Image,
    dataset: &[Image],
    spec: &BackboneSpec,
    cfg: &SelectConfig,
) -> Result<Selection> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("part selection needs a non-empty dataset".into()));
    }
    let backbone = Backbone::from_spec(spec)?;
    let ref_features = backbone.extract_features(reference)?;
    let features: Vec<FeatureMap> = dataset
        .par_iter()
        .map(|img| backbone.extract_features(img))
        .collect::<Result<_>>()?;
    select_from_features(&ref_features, &features, spec, cfg)
}

/// Phase one on precomputed feature maps.
pub fn select_from_features(
    reference: &FeatureMap,
    dataset: &[FeatureMap],
    spec: &BackboneSpec,
    cfg: &SelectConfig,
) -> Result<Selection> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("part selection needs a non-empty dataset".into()));
    }
    let sums: Vec<Vec<f64>> = dataset.iter().map(FeatureMap::channel_sums).collect();
    let mut locs = initial_locations(cfg.parts);
    let mut adam = Adam::new(2 * cfg.parts, cfg.step);
    let mut initial_loss = f64::NAN;
    let mut best = (f64::INFINITY, locs.clone());
    for it in 0..=cfg.iterations {
        let (loss, grad) = selection_terms(reference, dataset, &sums, &locs, cfg.lambda)?;
        if it == 0 {
            initial_loss = loss;
        }
        if loss < best.0 {
            best = (loss, locs.clone());
        }
        if it == cfg.iterations {
            break;
        }
        let mut flat: Vec<f64> = locs.iter().flat_map(|p| [p.x, p.y]).collect();
        let g: Vec<f64> = grad.iter().flat_map(|p| [p.x, p.y]).collect();
        adam.step(&mut flat, &g);
        for (p, xy) in locs.iter_mut().zip(flat.chunks_exact(2)) {
            p.x = xy[0].clamp(-cfg.clamp, cfg.clamp);
            p.y = xy[1].clamp(-cfg.clamp, cfg.clamp);
        }
    }
    let (final_loss, locations) = best;
    let descriptors = locations
        .iter()
        .map(|&p| descriptor_at(reference, p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = descriptors.iter().position(Descriptor::is_zero) {
        return Err(Error::DegenerateDescriptor { part: i });
    }
    let model = PartModel {
        locations,
        descriptors,
        backbone: spec.clone(),
        grid: (reference.rows(), reference.cols()),
        patch_size: cfg.patch_size,
    };
    model.validate()?;
    Ok(Selection {
        model,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cell_center;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize, c: usize) -> FeatureMap {
        let data = (0..rows * cols * c).map(|_| rng.random::<f64>()).collect();
        FeatureMap::normalized(rows, cols, c, data, 0.0).unwrap()
    }

    /// Smooth nonnegative features so the loss is well-behaved between cells.
    fn smooth_map(seed: u64, rows: usize, cols: usize, c: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let freqs: Vec<(f64, f64, f64)> = (0..c)
            .map(|_| (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..6.0)))
            .collect();
        let mut data = Vec::new();
        for r in 0..rows {
            for s in 0..cols {
                let p = cell_center(r, s, rows, cols).unwrap();
                for &(a, b, ph) in &freqs {
                    data.push(1.2 + (a * p.x + ph).sin() * (b * p.y - ph).cos());
                }
            }
        }
        FeatureMap::normalized(rows, cols, c, data, 0.0).unwrap()
    }

    fn loss_at(reference: &FeatureMap, dataset: &[FeatureMap], locs: &[Point2], lambda: f64) -> f64 {
        let hs: Vec<Vec<Heatmap>> = dataset
            .iter()
            .map(|f| {
                locs.iter()
                    .map(|&p| part_heatmap(f, &descriptor_at(reference, p).unwrap()).unwrap())
                    .collect()
            })
            .collect();
        selection_loss(&hs, lambda)
    }

    #[test]
    fn heatmap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_map(&mut rng, 2, 2, 2);
        let d = Descriptor(f.at(1, 0).to_vec());
        let h = part_heatmap(&f, &d).unwrap();
        assert_eq!(h.get(1, 0), 1.0);
        for r in 0..2 {
            for s in 0..2 {
                let want: f64 = f.at(r, s).iter().zip(&d.0).map(|(a, b)| a * b).sum();
                assert!((h.get(r, s) - want.min(1.0)).abs() < 1e-12);
            }
        }
        let f = FeatureMap::normalized(1, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 0.0).unwrap();
        let h = part_heatmap(&f, &Descriptor(vec![0.0, 0.0, 1.0])).unwrap();
        assert!(h.data().iter().all(|v| *v == 0.0));
        assert!(part_heatmap(&f, &Descriptor(vec![1.0])).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut one = vec![0.0; 9];
        one[4] = 1.0;
        let peak = Heatmap::new(3, 3, one).unwrap();
        assert!((selection_loss(&[vec![peak.clone()]], 0.1) - 1.0).abs() < 1e-15);
        assert!((selection_loss(&[vec![Heatmap::zeros(3, 3)]], 0.1) - 0.1).abs() < 1e-15);
        assert!((selection_loss(&[vec![peak.clone()], vec![peak]], 0.1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn grad_matches_finite_differences() {
        for seed in 0..5u64 {
            let reference = smooth_map(seed, 10, 10, 6);
            let dataset: Vec<FeatureMap> = (0..3).map(|k| smooth_map(100 + 3 * seed + k, 10, 10, 6)).collect();
            let locs = vec![Point2::new(-0.33, 0.21), Point2::new(0.27, -0.44), Point2::new(0.05, 0.52)];
            let (_, grad) = selection_loss_grad(&reference, &dataset, &locs, 0.1).unwrap();
            let h = 1e-4;
            for i in 0..locs.len() {
                for axis in 0..2 {
                    let mut plus = locs.clone();
                    let mut minus = locs.clone();
                    if axis == 0 {
                        plus[i].x += h;
                        minus[i].x -= h;
                    } else {
                        plus[i].y += h;
                        minus[i].y -= h;
                    }
                    let fd = (loss_at(&reference, &dataset, &plus, 0.1) - loss_at(&reference, &dataset, &minus, 0.1)) / (2.0 * h);
                    let an = if axis == 0 { grad[i].x } else { grad[i].y };
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(rel <= 1e-4, "seed {seed} part {i} axis {axis}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn mirror_symmetric_map_has_zero_x_gradient() {
        // 4x4 grid mirrored about x = 0
        let c = 3;
        let mut data = vec![0.0; 4 * 4 * c];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in 0..4 {
            for s in 0..2 {
                for k in 0..c {
                    let v = rng.random::<f64>() + 0.1;
                    data[(r * 4 + s) * c + k] = v;
                    data[(r * 4 + 3 - s) * c + k] = v;
                }
            }
        }
        let f = FeatureMap::normalized(4, 4, c, data, 0.0).unwrap();
        let g = selection_grad(&f, &[f.clone()], &[Point2::new(0.0, 0.1)], 0.1).unwrap();
        assert!(g[0].x.abs() < 1e-10);
    }

    #[test]
    fn flat_neighbourhood_has_zero_gradient() {
        let c = 2;
        let data: Vec<f64> = (0..6 * 6).flat_map(|_| [0.6, 0.8]).collect();
        let f = FeatureMap::normalized(6, 6, c, data, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let other = random_map(&mut rng, 6, 6, c);
        let g = selection_grad(&f, &[other], &[Point2::new(0.12, -0.07)], 0.1).unwrap();
        assert!(g[0].x.abs() < 1e-12 && g[0].y.abs() < 1e-12);
    }

    #[test]
    fn degenerate_descriptor_is_flagged() {
        let mut data = vec![0.0; 6 * 6 * 2];
        data[0] = 1.0;
        let f = FeatureMap::normalized(6, 6, 2, data, 0.0).unwrap();
        let err = selection_grad(&f, &[f.clone()], &[Point2::new(-0.8, -0.8), Point2::new(0.5, 0.5)], 0.1);
        assert!(matches!(err, Err(Error::DegenerateDescriptor { part: 1 })));
    }

    #[test]
    fn default_grid_initialization() {
        let l = initial_locations(9);
        assert_eq!(l.len(), 9);
        assert_eq!(l[0], Point2::new(-0.5, -0.5));
        assert_eq!(l[1], Point2::new(0.0, -0.5));
        assert_eq!(l[8], Point2::new(0.5, 0.5));
    }

    #[test]
    fn selection_descends_on_self_dataset() {
        let reference = smooth_map(42, 12, 12, 8);
        let cfg = SelectConfig {
            iterations: 30,
            ..SelectConfig::default()
        };
        let sel = select_from_features(&reference, &[reference.clone()], &BackboneSpec::default(), &cfg);
        // builtin spec declares 32 channels; the model check must notice the mismatch
        assert!(sel.is_err());
        let spec = BackboneSpec::FeatureFile {
            path: "unused.pbrf".into(),
            rows: 12,
            cols: 12,
            channels: 8,
        };
        let sel = select_from_features(&reference, &[reference.clone()], &spec, &cfg).unwrap();
        assert!(sel.final_loss <= sel.initial_loss);
        for p in &sel.model.locations {
            assert!(p.x.abs() <= 0.95 && p.y.abs() <= 0.95);
        }
        for d in &sel.model.descriptors {
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let img = Image::filled(16, 16, 0.5).unwrap();
        assert!(matches!(
            select_parts(&img, &[], &BackboneSpec::default(), &SelectConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
