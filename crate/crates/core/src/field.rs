//! Dense 2-D fields on a regular grid, stored row-major (`i` = row = y, `j` = column = x).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> ScalarField<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "ScalarField::from_vec",
                format!("{} values for a {height}x{width} grid", values.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Builds a field by evaluating `f(i, j)` at every cell.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.width + j]
    }

    /// Value at `(i, j)` with indices clamped into the grid (replicate extension).
    #[inline]
    pub fn get_clamped(&self, i: isize, j: isize) -> T {
        let i = i.clamp(0, self.height as isize - 1) as usize;
        let j = j.clamp(0, self.width as isize - 1) as usize;
        self.values[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.values[i * self.width + j] = v;
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_dims(other, "ScalarField::zip_map")?;
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(
            T::zero(),
            |acc, &v| if v.abs() > acc { v.abs() } else { acc },
        )
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ScalarField<U> {
        ScalarField {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub(crate) fn ensure_same_dims(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }
}

/// Two-component vector field `u = (u_x, u_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField2<T> {
    pub x: ScalarField<T>,
    pub y: ScalarField<T>,
}

impl<T: Scalar> VectorField2<T> {
    pub fn new(x: ScalarField<T>, y: ScalarField<T>) -> Result<Self> {
        x.ensure_same_dims(&y, "VectorField2::new")?;
        Ok(Self { x, y })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            x: ScalarField::zeros(height, width),
            y: ScalarField::zeros(height, width),
        }
    }

    pub fn uniform(height: usize, width: usize, ux: T, uy: T) -> Self {
        Self {
            x: ScalarField::filled(height, width, ux),
            y: ScalarField::filled(height, width, uy),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.x.dims()
    }

    pub fn max_abs(&self) -> (T, T) {
        (self.x.max_abs(), self.y.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn cast<U: Scalar>(&self) -> VectorField2<U> {
        VectorField2 {
            x: self.x.cast(),
            y: self.y.cast(),
        }
    }
}
