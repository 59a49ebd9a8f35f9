//! Second-order central-difference operators on [`ScalarField`]s.
//!
//! Neighbours outside the grid take the value of the nearest edge cell
//! (replicate extension). Masks are applied to operator outputs.

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField2};
use crate::grid::BoundaryMask;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Padding {
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilConfig {
    pub dx: f64,
    pub padding: Padding,
}

impl StencilConfig {
    pub fn new(dx: f64) -> Result<Self> {
        if !(dx > 0.0) || !dx.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "dx must be positive, got {dx}"
            )));
        }
        Ok(Self {
            dx,
            padding: Padding::Replicate,
        })
    }
}

/// Central-difference gradient `(∂f/∂x, ∂f/∂y)`; `x` runs along columns.
pub fn gradient<T: Scalar>(f: &ScalarField<T>, cfg: &StencilConfig) -> VectorField2<T> {
    let (h, w) = f.dims();
    let inv_2dx = T::lit(0.5 / cfg.dx);
    let gx = ScalarField::from_fn(h, w, |i, j| {
        let (i, j) = (i as isize, j as isize);
        (f.get_clamped(i, j + 1) - f.get_clamped(i, j - 1)) * inv_2dx
    });
    let gy = ScalarField::from_fn(h, w, |i, j| {
        let (i, j) = (i as isize, j as isize);
        (f.get_clamped(i + 1, j) - f.get_clamped(i - 1, j)) * inv_2dx
    });
    VectorField2 { x: gx, y: gy }
}

/// Five-point Laplacian.
pub fn laplacian<T: Scalar>(f: &ScalarField<T>, cfg: &StencilConfig) -> ScalarField<T> {
    let (h, w) = f.dims();
    let inv_dx2 = T::lit(1.0 / (cfg.dx * cfg.dx));
    let four = T::lit(4.0);
    ScalarField::from_fn(h, w, |i, j| {
        let (i, j) = (i as isize, j as isize);
        (f.get_clamped(i, j + 1)
            + f.get_clamped(i, j - 1)
            + f.get_clamped(i + 1, j)
            + f.get_clamped(i - 1, j)
            - four * f.get_clamped(i, j))
            * inv_dx2
    })
}

pub fn divergence<T: Scalar>(u: &VectorField2<T>, cfg: &StencilConfig) -> ScalarField<T> {
    let gx = gradient(&u.x, cfg);
    let gy = gradient(&u.y, cfg);
    gx.x.zip_map(&gy.y, |a, b| a + b)
        .expect("components share dimensions")
}

/// Pointwise `u · ∇c` (callers apply the sign).
pub fn advection_term<T: Scalar>(
    u: &VectorField2<T>,
    c: &ScalarField<T>,
    cfg: &StencilConfig,
) -> Result<ScalarField<T>> {
    if u.dims() != c.dims() {
        return Err(Error::shape(
            "advection_term",
            format!("velocity {:?} vs scalar {:?}", u.dims(), c.dims()),
        ));
    }
    let g = gradient(c, cfg);
    let ux_gx = u.x.zip_map(&g.x, |a, b| a * b)?;
    let uy_gy = u.y.zip_map(&g.y, |a, b| a * b)?;
    ux_gx.zip_map(&uy_gy, |a, b| a + b)
}

/// Zeroes `f` on excluded cells.
pub fn apply_mask<T: Scalar>(f: &ScalarField<T>, mask: &BoundaryMask) -> Result<ScalarField<T>> {
    if f.dims() != mask.dims() {
        return Err(Error::shape(
            "apply_mask",
            format!("field {:?} vs mask {:?}", f.dims(), mask.dims()),
        ));
    }
    let mut out = f.clone();
    for (v, &e) in out.values_mut().iter_mut().zip(mask.cells()) {
        if e {
            *v = T::zero();
        }
    }
    Ok(out)
}

pub fn apply_mask_vec<T: Scalar>(
    u: &VectorField2<T>,
    mask: &BoundaryMask,
) -> Result<VectorField2<T>> {
    Ok(VectorField2 {
        x: apply_mask(&u.x, mask)?,
        y: apply_mask(&u.y, mask)?,
    })
}
