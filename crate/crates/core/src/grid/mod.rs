//! Periodic torus discretization: grids, node fields, spectral calculus and
//! the massive elliptic solvers built on it.

mod io;
mod krylov;
mod spectral;

pub use io::{read_field, write_field, FieldHeader};
pub use krylov::{elliptic_solve, EllipticOptions, KrylovReport};
pub use spectral::{ball_average, Spectral};

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Uniform periodic grid on the torus `[0, box_side)^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusGrid {
    pub d: usize,
    pub n_points: usize,
    pub box_side: f64,
}

impl TorusGrid {
    pub fn new(d: usize, n_points: usize, box_side: f64) -> Result<Self> {
        let grid = Self { d, n_points, box_side };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.d) {
            return Err(Error::InvalidGrid(format!("dimension {} not in 1..=3", self.d)));
        }
        if self.n_points < 4 || !self.n_points.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "n_points = {} must be a power of two >= 4",
                self.n_points
            )));
        }
        if !(self.box_side.is_finite() && self.box_side > 0.0) {
            return Err(Error::InvalidGrid(format!("box_side = {}", self.box_side)));
        }
        Ok(())
    }

    /// Total node count `n_points^d`.
    pub fn nodes(&self) -> usize {
        self.n_points.pow(self.d as u32)
    }

    pub fn spacing(&self) -> f64 {
        self.box_side / self.n_points as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.d as i32)
    }

    /// Per-axis indices of a linear node index (axis 0 slowest).
    pub fn multi_index(&self, node: usize) -> [usize; 3] {
        let n = self.n_points;
        let mut idx = [0usize; 3];
        let mut rem = node;
        for axis in (0..self.d).rev() {
            idx[axis] = rem % n;
            rem /= n;
        }
        idx
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .take(self.d)
            .fold(0, |acc, &i| acc * self.n_points + (i % self.n_points))
    }

    /// Node coordinates `x_j = j * box_side / n_points`.
    pub fn coords(&self, node: usize) -> [f64; 3] {
        let h = self.spacing();
        let idx = self.multi_index(node);
        let mut x = [0.0; 3];
        for axis in 0..self.d {
            x[axis] = idx[axis] as f64 * h;
        }
        x
    }

    /// Minimal-image displacement `x - y` on the torus.
    pub fn periodic_delta(&self, x: &[f64], y: &[f64]) -> [f64; 3] {
        let l = self.box_side;
        let mut out = [0.0; 3];
        for axis in 0..self.d {
            let mut dx = (x[axis] - y[axis]) % l;
            if dx > 0.5 * l {
                dx -= l;
            } else if dx < -0.5 * l {
                dx += l;
            }
            out[axis] = dx;
        }
        out
    }

    pub fn periodic_distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let dx = self.periodic_delta(x, y);
        dx[..self.d].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Volume of the Euclidean ball of the given radius in dimension `d`.
    pub fn ball_volume(&self, radius: f64) -> f64 {
        match self.d {
            1 => 2.0 * radius,
            2 => std::f64::consts::PI * radius * radius,
            _ => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
        }
    }
}

/// Mass parameter `T` of the localizing term `(1/T) u`; `T = inf` drops it.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Mass(f64);

impl Mass {
    pub const INFINITE: Mass = Mass(f64::INFINITY);

    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && !t.is_nan() {
            Ok(Mass(t))
        } else {
            Err(Error::InvalidParameter(format!("mass parameter T = {t} must be in (0, inf]")))
        }
    }

    pub fn finite(t: f64) -> Self {
        Self::new(t).expect("positive mass parameter")
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    /// `1/T`, zero for `T = inf`.
    pub fn inverse(self) -> f64 {
        if self.is_infinite() {
            0.0
        } else {
            1.0 / self.0
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Mass(self.0 * factor)
    }
}

impl fmt::Display for Mass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Mass {
    fn serialize<Ser: Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Mass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        let t = match Repr::deserialize(d)? {
            Repr::Num(t) => t,
            Repr::Text(s) if matches!(s.as_str(), "inf" | "infinity" | "Infinity") => f64::INFINITY,
            Repr::Text(s) => return Err(serde::de::Error::custom(format!("bad mass parameter {s:?}"))),
        };
        Mass::new(t).map_err(serde::de::Error::custom)
    }
}

/// Tensor rank of a node field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Scalar,
    Vector,
    /// `d x d`, row-major per node.
    Matrix,
    /// Fixed number of channels independent of `d` (parameter fields).
    Channels(usize),
}

impl Rank {
    pub fn components(self, d: usize) -> usize {
        match self {
            Rank::Scalar => 1,
            Rank::Vector => d,
            Rank::Matrix => d * d,
            Rank::Channels(n) => n,
        }
    }
}

/// Node values of a field on a [`TorusGrid`].
///
/// Storage is component-major: component `c` occupies
/// `values[c * nodes .. (c + 1) * nodes]`, nodes row-major with axis 0 slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField<S> {
    grid: TorusGrid,
    rank: Rank,
    values: Vec<S>,
}

impl<S: Real> GridField<S> {
    pub fn zeros(grid: TorusGrid, rank: Rank) -> Self {
        let len = grid.nodes() * rank.components(grid.d);
        Self { grid, rank, values: vec![S::zero(); len] }
    }

    pub fn from_values(grid: TorusGrid, rank: Rank, values: Vec<S>) -> Result<Self> {
        let expected = grid.nodes() * rank.components(grid.d);
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite value".into()));
        }
        Ok(Self { grid, rank, values })
    }

    /// Scalar field from a function of the node coordinates.
    pub fn scalar_from_fn(grid: TorusGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.nodes())
            .map(|node| S::of(f(&grid.coords(node)[..grid.d])))
            .collect();
        Self { grid, rank: Rank::Scalar, values }
    }

    /// Field whose every node carries the same component vector.
    pub fn constant(grid: TorusGrid, rank: Rank, components: &[S]) -> Self {
        let nodes = grid.nodes();
        assert_eq!(components.len(), rank.components(grid.d));
        let mut values = Vec::with_capacity(nodes * components.len());
        for &c in components {
            values.extend(std::iter::repeat(c).take(nodes));
        }
        Self { grid, rank, values }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn n_components(&self) -> usize {
        self.rank.components(self.grid.d)
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn component(&self, c: usize) -> &[S] {
        let n = self.grid.nodes();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [S] {
        let n = self.grid.nodes();
        &mut self.values[c * n..(c + 1) * n]
    }

    /// Node value `(component c, node)`.
    #[inline]
    pub fn at(&self, c: usize, node: usize) -> S {
        self.values[c * self.grid.nodes() + node]
    }

    /// Gathers all components at one node into `out`.
    #[inline]
    pub fn node_into(&self, node: usize, out: &mut [S]) {
        let n = self.grid.nodes();
        for (c, o) in out.iter_mut().enumerate().take(self.n_components()) {
            *o = self.values[c * n + node];
        }
    }

    #[inline]
    pub fn set_node(&mut self, node: usize, vals: &[S]) {
        let n = self.grid.nodes();
        for (c, &v) in vals.iter().enumerate() {
            self.values[c * n + node] = v;
        }
    }

    /// Same grid, same rank.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.grid == other.grid && self.rank == other.rank
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{:?}/{:?} vs {:?}/{:?}",
                self.grid, self.rank, other.grid, other.rank
            )))
        }
    }

    /// Spatial mean of each component.
    pub fn mean(&self) -> Vec<S> {
        let n = S::of_usize(self.grid.nodes());
        (0..self.n_components())
            .map(|c| self.component(c).iter().copied().sum::<S>() / n)
            .collect()
    }

    /// Discrete `L^2` norm `(h^d sum |v|^2)^{1/2}` over all components.
    pub fn l2_norm(&self) -> S {
        let sq: S = self.values.iter().map(|&v| v * v).sum();
        (sq * S::of(self.grid.cell_volume())).sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.values.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, factor: S) {
        self.values.iter_mut().for_each(|v| *v = *v * factor);
    }

    pub fn scaled(&self, factor: S) -> Self {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: S, other: &Self) -> Result<()> {
        self.check_shape(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-S::one(), other)?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(S::one(), other)?;
        Ok(out)
    }

    /// Subtracts the spatial mean of every component.
    pub fn remove_mean(&mut self) {
        let means = self.mean();
        for (c, m) in means.into_iter().enumerate() {
            self.component_mut(c).iter_mut().for_each(|v| *v = *v - m);
        }
    }

    /// Re-types the field, e.g. `f64 -> f32`.
    pub fn cast<T: Real>(&self) -> GridField<T> {
        GridField {
            grid: self.grid,
            rank: self.rank,
            values: self.values.iter().map(|v| T::of(v.to_f64_lossy())).collect(),
        }
    }

    /// Node-wise transpose of a matrix field.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank != Rank::Matrix {
            return Err(Error::ShapeMismatch("transpose needs a matrix field".into()));
        }
        let d = self.grid.d;
        let mut out = self.clone();
        for i in 0..d {
            for j in 0..d {
                out.component_mut(i * d + j).copy_from_slice(self.component(j * d + i));
            }
        }
        Ok(out)
    }

    /// Node-wise matrix-vector product `a v` (`self` matrix field).
    pub fn mat_vec(&self, v: &Self) -> Result<Self> {
        if self.rank != Rank::Matrix || v.rank != Rank::Vector || self.grid != v.grid {
            return Err(Error::ShapeMismatch("mat_vec needs matrix * vector".into()));
        }
        let d = self.grid.d;
        let mut out = Self::zeros(self.grid, Rank::Vector);
        for i in 0..d {
            for j in 0..d {
                let a = self.component(i * d + j);
                let x = v.component(j);
                for ((o, &aij), &xj) in out.component_mut(i).iter_mut().zip(a).zip(x) {
                    *o = *o + aij * xj;
                }
            }
        }
        Ok(out)
    }

    /// Node-wise `a e` for a constant vector `e`.
    pub fn mat_const_vec(&self, e: &[S]) -> Result<Self> {
        let v = Self::constant(self.grid, Rank::Vector, e);
        self.mat_vec(&v)
    }

    /// Node-wise dot product of two vector fields.
    pub fn dot(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        let mut out = Self::zeros(self.grid, Rank::Scalar);
        for c in 0..self.n_components() {
            for ((o, &a), &b) in out.values.iter_mut().zip(self.component(c)).zip(other.component(c)) {
                *o = *o + a * b;
            }
        }
        Ok(out)
    }

    /// Projection onto a constant direction: node-wise `v . e`.
    pub fn dot_const(&self, e: &[S]) -> Self {
        let mut out = Self::zeros(self.grid, Rank::Scalar);
        for (c, &ec) in e.iter().enumerate().take(self.n_components()) {
            for (o, &a) in out.values.iter_mut().zip(self.component(c)) {
                *o = *o + a * ec;
            }
        }
        out
    }

    /// Node-wise Euclidean norm squared, summed over components.
    pub fn squared_magnitude(&self) -> Self {
        self.dot(self).expect("same shape")
    }
}
