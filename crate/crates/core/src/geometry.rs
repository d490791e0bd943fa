//! Coordinate conventions, affine warps and bilinear sampling.
//!
//! Grids of `R` rows and `S` columns are mapped onto the normalized square
//! `[-1, 1]²` through their cell centers: column `s` sits at
//! `x = -1 + 2(s + 0.5)/S` and row `r` at `y = -1 + 2(r + 0.5)/R`. Reads that
//! fall outside the grid see zeros.

use crate::error::{Error, Result};

/// A point in normalized image coordinates. `x` runs along columns, `y` along rows.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn in_unit_box(&self) -> bool {
        self.x.abs() <= 1.0 && self.y.abs() <= 1.0
    }

    pub fn dist2(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// Parameters of the similarity warp used by the spatial transformer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpParams {
    /// Isotropic scale of the sampling grid.
    pub scale: f64,
    /// Horizontal translation in normalized units.
    pub shift_x: f64,
    /// Vertical translation in normalized units.
    pub shift_y: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl WarpParams {
    pub const IDENTITY: WarpParams = WarpParams::new(1.0, 0.0, 0.0, 0.0);

    pub const fn new(scale: f64, shift_x: f64, shift_y: f64, angle: f64) -> Self {
        Self {
            scale,
            shift_x,
            shift_y,
            angle,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.scale, self.shift_x, self.shift_y, self.angle]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Row-major 2x3 affine matrix mapping output coordinates to input coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2(pub [[f64; 3]; 2]);

impl Affine2 {
    pub fn apply(&self, p: Point2) -> Point2 {
        let m = &self.0;
        Point2::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }

    pub fn linear_det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }
}

/// Builds the affine matrix `[[s cos a, -s sin a, tx], [s sin a, s cos a, ty]]`.
pub fn affine_matrix(theta: &WarpParams) -> Result<Affine2> {
    if !theta.is_finite() {
        return Err(Error::Domain(format!("non-finite warp parameters {theta:?}")));
    }
    let (sin, cos) = theta.angle.sin_cos();
    let s = theta.scale;
    Ok(Affine2([
        [s * cos, -s * sin, theta.shift_x],
        [s * sin, s * cos, theta.shift_y],
    ]))
}

/// Normalized coordinates of the center of cell `(row, col)` on a `rows x cols` grid.
pub fn cell_center(row: usize, col: usize, rows: usize, cols: usize) -> Result<Point2> {
    if row >= rows || col >= cols {
        return Err(Error::Domain(format!(
            "cell ({row}, {col}) outside a {rows}x{cols} grid"
        )));
    }
    Ok(cell_center_unchecked(row, col, rows, cols))
}

#[inline]
pub(crate) fn cell_center_unchecked(row: usize, col: usize, rows: usize, cols: usize) -> Point2 {
    Point2::new(
        -1.0 + 2.0 * (col as f64 + 0.5) / cols as f64,
        -1.0 + 2.0 * (row as f64 + 0.5) / rows as f64,
    )
}

/// Same mapping as [`cell_center`] extended to signed (possibly off-grid) indices.
#[inline]
pub(crate) fn lattice_point(row: isize, col: isize, rows: usize, cols: usize) -> Point2 {
    Point2::new(
        -1.0 + 2.0 * (col as f64 + 0.5) / cols as f64,
        -1.0 + 2.0 * (row as f64 + 0.5) / rows as f64,
    )
}

/// Continuous (row, col) index of a normalized point.
#[inline]
pub(crate) fn grid_coords(p: Point2, rows: usize, cols: usize) -> (f64, f64) {
    (
        (p.y + 1.0) * rows as f64 * 0.5 - 0.5,
        (p.x + 1.0) * cols as f64 * 0.5 - 0.5,
    )
}

// Grid-aligned points come back from the normalized round trip a few ulps off
// the node; pull them onto it so node reads are exact.
const SNAP: f64 = 1e-9;

#[inline]
fn split(v: f64) -> (isize, f64) {
    let f0 = fast_floor(v);
    let f = v - f0;
    if f < SNAP {
        (f0 as isize, 0.0)
    } else if f > 1.0 - SNAP {
        (f0 as isize + 1, 0.0)
    } else {
        (f0 as isize, f)
    }
}

// `floor` for values well inside the i64 range, without a libm call.
#[inline]
fn fast_floor(v: f64) -> f64 {
    if !(v.abs() < 1e15) {
        return v.floor();
    }
    let t = v as i64 as f64;
    if t > v {
        t - 1.0
    } else {
        t
    }
}

/// Four-neighbour bilinear stencil: base cell and fractional offsets.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub r0: isize,
    pub c0: isize,
    pub fr: f64,
    pub fc: f64,
}

impl Stencil {
    #[inline]
    pub fn at(p: Point2, rows: usize, cols: usize) -> Self {
        let (r, c) = grid_coords(p, rows, cols);
        Self::from_grid(r, c)
    }

    /// Stencil at continuous grid coordinates.
    #[inline]
    pub fn from_grid(r: f64, c: f64) -> Self {
        let (r0, fr) = split(r);
        let (c0, fc) = split(c);
        Stencil { r0, c0, fr, fc }
    }

    /// The four (row, col, weight) taps in fixed order.
    #[inline]
    pub fn taps(&self) -> [(isize, isize, f64); 4] {
        let (fr, fc) = (self.fr, self.fc);
        [
            (self.r0, self.c0, (1.0 - fr) * (1.0 - fc)),
            (self.r0, self.c0 + 1, (1.0 - fr) * fc),
            (self.r0 + 1, self.c0, fr * (1.0 - fc)),
            (self.r0 + 1, self.c0 + 1, fr * fc),
        ]
    }
}

#[inline]
pub(crate) fn in_grid(r: isize, c: isize, rows: usize, cols: usize) -> Option<usize> {
    if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
        Some(r as usize * cols + c as usize)
    } else {
        None
    }
}

/// Bilinear read of a row-major scalar grid with zero padding.
pub fn bilinear_sample(data: &[f64], rows: usize, cols: usize, p: Point2) -> f64 {
    debug_assert_eq!(data.len(), rows * cols);
    sample_stencil(data, rows, cols, Stencil::at(p, rows, cols))
}

#[inline]
fn sample_stencil(data: &[f64], rows: usize, cols: usize, st: Stencil) -> f64 {
    if st.r0 >= 0 && st.c0 >= 0 && ((st.r0 + 1) as usize) < rows && ((st.c0 + 1) as usize) < cols {
        let i = st.r0 as usize * cols + st.c0 as usize;
        if st.fr == 0.0 && st.fc == 0.0 {
            return data[i];
        }
        let (fr, fc) = (st.fr, st.fc);
        return (1.0 - fr) * (1.0 - fc) * data[i]
            + (1.0 - fr) * fc * data[i + 1]
            + fr * (1.0 - fc) * data[i + cols]
            + fr * fc * data[i + cols + 1];
    }
    if st.fr == 0.0 && st.fc == 0.0 {
        return in_grid(st.r0, st.c0, rows, cols).map_or(0.0, |i| data[i]);
    }
    let mut acc = 0.0;
    for (r, c, w) in st.taps() {
        if let Some(i) = in_grid(r, c, rows, cols) {
            acc += w * data[i];
        }
    }
    acc
}

/// Bilinear read of every channel of a channel-innermost grid into `out`.
pub fn bilinear_sample_channels(
    data: &[f64],
    rows: usize,
    cols: usize,
    channels: usize,
    p: Point2,
    out: &mut [f64],
) {
    debug_assert_eq!(data.len(), rows * cols * channels);
    debug_assert_eq!(out.len(), channels);
    out.iter_mut().for_each(|v| *v = 0.0);
    let st = Stencil::at(p, rows, cols);
    if st.fr == 0.0 && st.fc == 0.0 {
        if let Some(i) = in_grid(st.r0, st.c0, rows, cols) {
            out.copy_from_slice(&data[i * channels..(i + 1) * channels]);
        }
        return;
    }
    for (r, c, w) in st.taps() {
        if let Some(i) = in_grid(r, c, rows, cols) {
            let cell = &data[i * channels..(i + 1) * channels];
            for (o, v) in out.iter_mut().zip(cell) {
                *o += w * v;
            }
        }
    }
}

/// A grayscale image with values in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Domain("image dimensions must be positive".into()));
        }
        if data.len() != height * width {
            return Err(Error::Domain(format!(
                "image data has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!(
                "image value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Rasterizes `f(point)` at every cell center, clamping to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(Point2) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let v = f(cell_center_unchecked(r, c, height, width));
                data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn sample(&self, p: Point2) -> f64 {
        bilinear_sample(&self.data, self.height, self.width, p)
    }
}

/// Spatial-transformer patch extraction: output cell `(r, s)` reads the input at
/// `A(theta) * cell_center(r, s)`.
pub fn warp_extract(u: &Image, theta: &WarpParams, out_size: usize) -> Result<Image> {
    if out_size < 2 {
        return Err(Error::Domain(format!("patch size {out_size} is below 2")));
    }
    let a = affine_matrix(theta)?;
    let m = a.0;
    let coords: Vec<f64> = (0..out_size)
        .map(|i| cell_center_unchecked(0, i, 1, out_size).x)
        .collect();
    let (h, w) = (u.height, u.width);
    // grid coordinates of the input: g = (q + 1) * size / 2 - 0.5
    let (hr, hc) = (0.5 * h as f64, 0.5 * w as f64);
    let (hm1, wm1) = ((h - 1) as f64, (w - 1) as f64);
    let mut data = Vec::with_capacity(out_size * out_size);
    for &y in &coords {
        let bx = m[0][1] * y + m[0][2];
        let by = m[1][1] * y + m[1][2];
        for &x in &coords {
            let gc = (m[0][0] * x + bx + 1.0) * hc - 0.5;
            let gr = (m[1][0] * x + by + 1.0) * hr - 0.5;
            let v = if gr >= 0.0 && gc >= 0.0 && gr < hm1 && gc < wm1 {
                // interior: truncation is floor and all four taps exist
                let (r0, c0) = (gr as i32 as usize, gc as i32 as usize);
                let (mut fr, mut fc) = (gr - r0 as f64, gc - c0 as f64);
                fr = if fr < SNAP { 0.0 } else { fr };
                fc = if fc < SNAP { 0.0 } else { fc };
                if fr > 1.0 - SNAP || fc > 1.0 - SNAP {
                    sample_stencil(&u.data, h, w, Stencil::from_grid(gr, gc))
                } else {
                    let i = r0 * w + c0;
                    let d = &u.data;
                    (1.0 - fr) * (1.0 - fc) * d[i]
                        + (1.0 - fr) * fc * d[i + 1]
                        + fr * (1.0 - fc) * d[i + w]
                        + fr * fc * d[i + w + 1]
                }
            } else {
                sample_stencil(&u.data, h, w, Stencil::from_grid(gr, gc))
            };
            data.push(if v < 0.0 { 0.0 } else if v > 1.0 { 1.0 } else { v });
        }
    }
    Ok(Image {
        height: out_size,
        width: out_size,
        data,
    })
}
