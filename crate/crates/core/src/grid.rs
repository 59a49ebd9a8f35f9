//! Grids, obstacle geometry, distance fields, boundary masks and the spatial
//! embedding fed to the inference network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::scalar::Scalar;

/// Exclusion threshold (in cells) for first-order stencil outputs.
pub const MASK1_THRESHOLD: f64 = 2.5;
/// Exclusion threshold (in cells) for second-order stencil outputs.
pub const MASK2_THRESHOLD: f64 = 3.5;

/// Attribute value of a solid cell with no fluid neighbour.
pub const ATTR_SOLID: u8 = 0;
/// Attribute value of a fluid cell.
pub const ATTR_FLUID: u8 = 1;
/// Attribute value of a wall cell: solid next to fluid, or on the outer ring.
pub const ATTR_BOUNDARY: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Cell size (dimensionless).
    pub dx: f64,
    /// Interval between consecutive frames (dimensionless).
    pub dt: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, dx: f64, dt: f64) -> Result<Self> {
        let g = Self {
            height,
            width,
            dx,
            dt,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArgument(format!(
                "grid must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) || !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dx and dt must be positive, got dx={} dt={}",
                self.dx, self.dt
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn with_dt(self, dt: f64) -> Self {
        Self { dt, ..self }
    }
}

/// Solid/fluid occupancy. The one-cell outer ring is always solid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObstacleMap {
    height: usize,
    width: usize,
    solid: Vec<bool>,
}

impl ObstacleMap {
    /// Closed box: only the outer ring is solid.
    pub fn empty(height: usize, width: usize) -> Self {
        Self::from_cells(height, width, vec![false; height * width])
            .expect("cell count matches dimensions")
    }

    /// Builds a map from row-major occupancy; the outer ring is forced solid.
    pub fn from_cells(height: usize, width: usize, mut solid: Vec<bool>) -> Result<Self> {
        if solid.len() != height * width || height < 3 || width < 3 {
            return Err(Error::shape(
                "ObstacleMap::from_cells",
                format!("{} cells for a {height}x{width} grid", solid.len()),
            ));
        }
        for i in 0..height {
            for j in 0..width {
                if i == 0 || j == 0 || i == height - 1 || j == width - 1 {
                    solid[i * width + j] = true;
                }
            }
        }
        Ok(Self {
            height,
            width,
            solid,
        })
    }

    /// Parses the text grid format: `#` = solid, `.` = fluid, one row per line.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut cells = Vec::with_capacity(height * width);
        for (i, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Format(format!(
                    "obstacle grid row {i} has {} cells, expected {width}",
                    row.chars().count()
                )));
            }
            for ch in row.chars() {
                match ch {
                    '#' => cells.push(true),
                    '.' => cells.push(false),
                    other => {
                        return Err(Error::Format(format!(
                            "unexpected character {other:?} in obstacle grid row {i}"
                        )))
                    }
                }
            }
        }
        Self::from_cells(height, width, cells)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for i in 0..self.height {
            for j in 0..self.width {
                s.push(if self.is_solid(i, j) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn is_solid(&self, i: usize, j: usize) -> bool {
        self.solid[i * self.width + j]
    }

    pub fn cells(&self) -> &[bool] {
        &self.solid
    }

    pub fn set_solid(&mut self, i: usize, j: usize, solid: bool) {
        let ring = i == 0 || j == 0 || i == self.height - 1 || j == self.width - 1;
        self.solid[i * self.width + j] = solid || ring;
    }

    /// Marks every cell whose center lies within `radius` of `(ci, cj)` as solid.
    pub fn add_disk(&mut self, ci: f64, cj: f64, radius: f64) {
        for i in 0..self.height {
            for j in 0..self.width {
                let (di, dj) = (i as f64 - ci, j as f64 - cj);
                if di * di + dj * dj <= radius * radius {
                    self.set_solid(i, j, true);
                }
            }
        }
    }

    pub fn add_rect(&mut self, i0: usize, j0: usize, i1: usize, j1: usize) {
        for i in i0..i1.min(self.height) {
            for j in j0..j1.min(self.width) {
                self.set_solid(i, j, true);
            }
        }
    }

    pub fn fluid_count(&self) -> usize {
        self.solid.iter().filter(|s| !**s).count()
    }

    pub fn matches(&self, grid: &GridSpec) -> bool {
        self.height == grid.height && self.width == grid.width
    }
}

/// Near-boundary exclusion set `{x | d(x) <= threshold}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMask {
    height: usize,
    width: usize,
    excluded: Vec<bool>,
    threshold: f64,
}

impl BoundaryMask {
    /// Mask that excludes nothing.
    pub fn none(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            excluded: vec![false; height * width],
            threshold: f64::NEG_INFINITY,
        }
    }

    pub fn from_cells(
        height: usize,
        width: usize,
        excluded: Vec<bool>,
        threshold: f64,
    ) -> Result<Self> {
        if excluded.len() != height * width {
            return Err(Error::shape(
                "BoundaryMask::from_cells",
                format!("{} cells for a {height}x{width} grid", excluded.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            excluded,
            threshold,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    #[inline]
    pub fn is_excluded(&self, i: usize, j: usize) -> bool {
        self.excluded[i * self.width + j]
    }

    pub fn cells(&self) -> &[bool] {
        &self.excluded
    }

    pub fn excluded_count(&self) -> usize {
        self.excluded.iter().filter(|e| **e).count()
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.excluded
            .iter()
            .zip(&other.excluded)
            .all(|(a, b)| !*a || *b)
    }

    /// `1` on kept cells, `0` on excluded ones.
    pub fn keep_weights<T: Scalar>(&self) -> Vec<T> {
        self.excluded
            .iter()
            .map(|&e| if e { T::zero() } else { T::one() })
            .collect()
    }
}

/// Spatial embedding `(x, y, d, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialEmbedding<T> {
    /// Normalized cell-center column coordinate `(j + 0.5) / W`.
    pub coord_x: ScalarField<T>,
    /// Normalized cell-center row coordinate `(i + 0.5) / H`.
    pub coord_y: ScalarField<T>,
    pub sdf: ScalarField<T>,
    pub attr: ScalarField<T>,
}

impl<T: Scalar> SpatialEmbedding<T> {
    pub fn dims(&self) -> (usize, usize) {
        self.sdf.dims()
    }

    pub fn mask1(&self) -> BoundaryMask {
        boundary_mask(&self.sdf, MASK1_THRESHOLD).expect("positive constant threshold")
    }

    pub fn mask2(&self) -> BoundaryMask {
        boundary_mask(&self.sdf, MASK2_THRESHOLD).expect("positive constant threshold")
    }
}

/// Exact squared Euclidean distance (in cells) from every cell to the nearest
/// solid cell center, via Meijster's separable two-pass transform.
pub fn squared_distance_transform(obstacles: &ObstacleMap) -> Vec<i64> {
    let (h, w) = (obstacles.height, obstacles.width);
    let inf = (h + w) as i64;

    // Column pass: vertical distance to the nearest solid cell in the same column.
    let mut g = vec![0i64; h * w];
    for j in 0..w {
        g[j] = if obstacles.is_solid(0, j) { 0 } else { inf };
        for i in 1..h {
            g[i * w + j] = if obstacles.is_solid(i, j) {
                0
            } else {
                (g[(i - 1) * w + j] + 1).min(inf)
            };
        }
        for i in (0..h - 1).rev() {
            if g[(i + 1) * w + j] < g[i * w + j] {
                g[i * w + j] = g[(i + 1) * w + j] + 1;
            }
        }
    }

    // Row pass: lower envelope of parabolas (x - u)^2 + g(u)^2.
    let mut out = vec![0i64; h * w];
    let mut s = vec![0usize; w];
    let mut t = vec![0i64; w];
    for i in 0..h {
        let row = &g[i * w..(i + 1) * w];
        let f = |x: i64, u: usize| (x - u as i64).pow(2) + row[u] * row[u];
        let sep = |u: usize, v: usize| {
            let (ui, vi) = (u as i64, v as i64);
            (vi * vi - ui * ui + row[v] * row[v] - row[u] * row[u]).div_euclid(2 * (vi - ui))
        };
        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..w {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let next = 1 + sep(s[q as usize], u);
                if next < w as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = next;
                }
            }
        }
        for u in (0..w).rev() {
            out[i * w + u] = f(u as i64, s[q as usize]);
            if u as i64 == t[q as usize] {
                q -= 1;
            }
        }
    }
    out
}

/// Distance (in cells) from each fluid cell to the nearest solid cell center;
/// zero on solid cells.
pub fn compute_sdf<T: Scalar>(obstacles: &ObstacleMap, grid: &GridSpec) -> Result<ScalarField<T>> {
    if !obstacles.matches(grid) {
        return Err(Error::shape(
            "compute_sdf",
            format!(
                "obstacles {}x{} vs grid {}x{}",
                obstacles.height, obstacles.width, grid.height, grid.width
            ),
        ));
    }
    if obstacles.fluid_count() == 0 {
        return Err(Error::NoFluidRegion);
    }
    let d2 = squared_distance_transform(obstacles);
    ScalarField::from_vec(
        grid.height,
        grid.width,
        d2.into_iter().map(|v| T::lit(v as f64).sqrt()).collect(),
    )
}

/// Cell attributes: [`ATTR_SOLID`], [`ATTR_FLUID`] or [`ATTR_BOUNDARY`].
pub fn attribute_field<T: Scalar>(
    obstacles: &ObstacleMap,
    sdf: &ScalarField<T>,
) -> Result<ScalarField<T>> {
    let (h, w) = (obstacles.height, obstacles.width);
    if sdf.dims() != (h, w) {
        return Err(Error::shape(
            "attribute_field",
            format!("obstacles {h}x{w} vs sdf {:?}", sdf.dims()),
        ));
    }
    Ok(ScalarField::from_fn(h, w, |i, j| {
        let code = if !obstacles.is_solid(i, j) {
            ATTR_FLUID
        } else if i == 0 || j == 0 || i == h - 1 || j == w - 1 {
            ATTR_BOUNDARY
        } else {
            let touches_fluid = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
                .iter()
                .any(|&(a, b)| !obstacles.is_solid(a, b));
            if touches_fluid {
                ATTR_BOUNDARY
            } else {
                ATTR_SOLID
            }
        };
        T::lit(code as f64)
    }))
}

pub fn boundary_mask<T: Scalar>(sdf: &ScalarField<T>, threshold: f64) -> Result<BoundaryMask> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "mask threshold must be positive and finite, got {threshold}"
        )));
    }
    let m = T::lit(threshold);
    BoundaryMask::from_cells(
        sdf.height(),
        sdf.width(),
        sdf.values().iter().map(|&d| d <= m).collect(),
        threshold,
    )
}

pub fn spatial_embedding<T: Scalar>(
    obstacles: &ObstacleMap,
    grid: &GridSpec,
) -> Result<SpatialEmbedding<T>> {
    let sdf = compute_sdf(obstacles, grid)?;
    let attr = attribute_field(obstacles, &sdf)?;
    let (h, w) = (grid.height, grid.width);
    let coord_x = ScalarField::from_fn(h, w, |_, j| T::lit((j as f64 + 0.5) / w as f64));
    let coord_y = ScalarField::from_fn(h, w, |i, _| T::lit((i as f64 + 0.5) / h as f64));
    Ok(SpatialEmbedding {
        coord_x,
        coord_y,
        sdf,
        attr,
    })
}
