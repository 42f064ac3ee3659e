//! Massive nonlinear correctors `(1/T) phi - div A(x, xi + grad phi) = 0`
//! by damped Newton-Krylov iteration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ParameterField;
use crate::grid::{read_field, write_field, EllipticOptions, GridField, Mass, Rank, Spectral, TorusGrid};
use crate::operator::{OperatorModel, MAX_CHANNELS};
use crate::scalar::Real;

/// A node-dependent constitutive law `p -> A(x, p)`.
pub trait ConstitutiveLaw<S: Real> {
    fn grid(&self) -> &TorusGrid;

    fn flux(&self, node: usize, p: &[S], out: &mut [S]);

    /// Row-major `d x d` Jacobian of `flux` in `p`.
    fn jacobian(&self, node: usize, p: &[S], out: &mut [S]);

    /// Multilinear derivative of order `dirs.len()` in `p`.
    fn d_xi(&self, node: usize, p: &[S], dirs: &[&[S]], out: &mut [S]) -> Result<()> {
        let _ = (node, p, out);
        Err(Error::OrderUnavailable(dirs.len()))
    }
}

/// `A(omega(x), p) + f(x)` for a built-in model on a sampled parameter field.
pub struct HeterogeneousLaw<'a, S: Real> {
    pub model: &'a OperatorModel<S>,
    pub omega: &'a ParameterField<S>,
    /// Optional additive node flux, used for divergence-form forcing.
    pub forcing: Option<&'a GridField<S>>,
}

impl<'a, S: Real> HeterogeneousLaw<'a, S> {
    pub fn new(model: &'a OperatorModel<S>, omega: &'a ParameterField<S>) -> Result<Self> {
        if omega.n_components() != model.n || omega.grid().d != model.d {
            return Err(Error::ShapeMismatch(format!(
                "model expects d = {}, n = {}; field has d = {}, n = {}",
                model.d,
                model.n,
                omega.grid().d,
                omega.n_components()
            )));
        }
        Ok(Self { model, omega, forcing: None })
    }

    pub fn with_forcing(mut self, forcing: &'a GridField<S>) -> Self {
        self.forcing = Some(forcing);
        self
    }

    #[inline]
    pub fn omega_at(&self, node: usize) -> [S; MAX_CHANNELS] {
        let mut w = [S::zero(); MAX_CHANNELS];
        self.omega.node_into(node, &mut w[..self.model.n]);
        w
    }
}

impl<S: Real> ConstitutiveLaw<S> for HeterogeneousLaw<'_, S> {
    fn grid(&self) -> &TorusGrid {
        self.omega.grid()
    }

    fn flux(&self, node: usize, p: &[S], out: &mut [S]) {
        let w = self.omega_at(node);
        self.model.apply(&w[..self.model.n], p, out);
        if let Some(f) = self.forcing {
            for (i, o) in out.iter_mut().enumerate().take(self.model.d) {
                *o = *o + f.at(i, node);
            }
        }
    }

    fn jacobian(&self, node: usize, p: &[S], out: &mut [S]) {
        let w = self.omega_at(node);
        self.model.jacobian(&w[..self.model.n], p, out);
    }

    fn d_xi(&self, node: usize, p: &[S], dirs: &[&[S]], out: &mut [S]) -> Result<()> {
        let w = self.omega_at(node);
        self.model.d_xi(&w[..self.model.n], p, dirs, out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Relative residual target.
    pub tol: f64,
    pub max_newton: usize,
    /// Total Krylov iterations per linear solve; `None` means `10 * nodes`.
    pub krylov_cap: Option<usize>,
    pub restart: usize,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_newton: 50, krylov_cap: None, restart: 40, max_halvings: 30 }
    }
}

impl SolverOptions {
    pub fn elliptic(&self) -> EllipticOptions {
        EllipticOptions { tol: self.tol, max_iterations: self.krylov_cap, restart: self.restart }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

/// A solved massive corrector together with its flux and linearized coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorState<S> {
    pub xi: Vec<S>,
    pub mass: Mass,
    pub phi: GridField<S>,
    pub grad_phi: GridField<S>,
    /// `A(x, xi + grad phi)`.
    pub flux: GridField<S>,
    /// `d_xi A(x, xi + grad phi)`.
    pub lin_coeff: GridField<S>,
    pub residual: f64,
    pub newton_iters: usize,
    /// Relative residual before each Newton step and after the last one.
    pub history: Vec<f64>,
}

/// Node-wise `A(x, xi + g(x))`.
pub fn flux_field<S: Real, L: ConstitutiveLaw<S> + ?Sized>(law: &L, xi: &[S], grad: &GridField<S>) -> GridField<S> {
    let grid = *law.grid();
    let d = grid.d;
    let mut out = GridField::zeros(grid, Rank::Vector);
    let (mut p, mut q) = ([S::zero(); 3], [S::zero(); 3]);
    for node in 0..grid.nodes() {
        grad.node_into(node, &mut p[..d]);
        (0..d).for_each(|i| p[i] = p[i] + xi[i]);
        law.flux(node, &p[..d], &mut q[..d]);
        out.set_node(node, &q[..d]);
    }
    out
}

/// Node-wise `d_xi A(x, xi + g(x))` as a matrix field.
pub fn jacobian_field<S: Real, L: ConstitutiveLaw<S> + ?Sized>(law: &L, xi: &[S], grad: &GridField<S>) -> GridField<S> {
    let grid = *law.grid();
    let d = grid.d;
    let mut out = GridField::zeros(grid, Rank::Matrix);
    let mut p = [S::zero(); 3];
    let mut j = [S::zero(); 9];
    for node in 0..grid.nodes() {
        grad.node_into(node, &mut p[..d]);
        (0..d).for_each(|i| p[i] = p[i] + xi[i]);
        law.jacobian(node, &p[..d], &mut j[..d * d]);
        out.set_node(node, &j[..d * d]);
    }
    out
}

/// `(1/T) phi - div flux`.
pub fn corrector_residual<S: Real>(spectral: &Spectral<S>, mass: Mass, phi: &GridField<S>, flux: &GridField<S>) -> Result<GridField<S>> {
    let div = spectral.divergence(flux)?;
    let mut r = phi.scaled(S::of(mass.inverse()));
    r.axpy(-S::one(), &div)?;
    Ok(r)
}

fn max_wavenumber(grid: &TorusGrid) -> f64 {
    std::f64::consts::PI * grid.n_points as f64 / grid.box_side
}

/// Solves `(1/T) phi - div A(x, xi + grad phi) = 0` from `phi = 0`.
///
/// Relative residuals are measured against the initial residual, floored at
/// round-off scale so that already-solved problems stop immediately.
pub fn solve_with_law<S: Real, L: ConstitutiveLaw<S> + ?Sized>(
    spectral: &Spectral<S>,
    law: &L,
    xi: &[S],
    mass: Mass,
    opts: &SolverOptions,
) -> Result<CorrectorState<S>> {
    let grid = *spectral.grid();
    if *law.grid() != grid || xi.len() != grid.d {
        return Err(Error::ShapeMismatch("law, grid and xi disagree".into()));
    }
    static SMALL_BOX: std::sync::Once = std::sync::Once::new();
    if !mass.is_infinite() && grid.box_side < 10.0 * mass.value().sqrt() {
        SMALL_BOX.call_once(|| log::warn!("box side {} is below 10 sqrt(T) = {}", grid.box_side, 10.0 * mass.value().sqrt()));
    }
    let mut phi = GridField::zeros(grid, Rank::Scalar);
    let mut grad = GridField::zeros(grid, Rank::Vector);
    let mut flux = flux_field(law, xi, &grad);
    let r0 = corrector_residual(spectral, mass, &phi, &flux)?.l2_norm().to_f64_lossy();
    let floor = 1e-13 * flux.l2_norm().to_f64_lossy() * max_wavenumber(&grid);
    let reference = r0.max(floor).max(f64::MIN_POSITIVE);
    let mut norm = r0;
    let mut history = vec![norm / reference];
    let mut iters = 0;

    while norm / reference > opts.tol {
        if iters >= opts.max_newton {
            return Err(Error::NoConvergence { iterations: iters, residual: norm / reference });
        }
        let a = jacobian_field(law, xi, &grad);
        // -F = div(flux) - phi/T, i.e. g = flux and f = -phi
        let eps = (S::epsilon().to_f64_lossy() * 8.0).max(1e-13);
        let eta = (0.1 * opts.tol * reference / norm).clamp(eps, 1e-2);
        let mut lin = opts.elliptic();
        lin.tol = eta;
        let minus_phi = phi.scaled(-S::one());
        let (delta, _) = crate::grid::elliptic_solve(spectral, &a, mass, &flux, Some(&minus_phi), &lin)?;
        let grad_delta = spectral.gradient(&delta)?;

        let mut step = S::one();
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let mut trial = phi.clone();
            trial.axpy(step, &delta)?;
            if mass.is_infinite() {
                trial.remove_mean();
            }
            let mut trial_grad = grad.clone();
            trial_grad.axpy(step, &grad_delta)?;
            let trial_flux = flux_field(law, xi, &trial_grad);
            let trial_norm = corrector_residual(spectral, mass, &trial, &trial_flux)?.l2_norm().to_f64_lossy();
            if trial_norm < norm {
                phi = trial;
                grad = trial_grad;
                flux = trial_flux;
                norm = trial_norm;
                accepted = true;
                break;
            }
            step = step * S::of(0.5);
        }
        if !accepted {
            return Err(Error::LineSearchStall { iteration: iters, residual: norm / reference });
        }
        iters += 1;
        history.push(norm / reference);
    }
    let lin_coeff = jacobian_field(law, xi, &grad);
    Ok(CorrectorState {
        xi: xi.to_vec(),
        mass,
        phi,
        grad_phi: grad,
        flux,
        lin_coeff,
        residual: norm / reference,
        newton_iters: iters,
        history,
    })
}

/// Massive corrector of a built-in model on a sampled parameter field.
pub fn solve_nonlinear<S: Real>(
    spectral: &Spectral<S>,
    omega: &ParameterField<S>,
    model: &OperatorModel<S>,
    xi: &[S],
    mass: Mass,
    opts: &SolverOptions,
) -> Result<CorrectorState<S>> {
    if model.max_order < 1 {
        return Err(Error::OrderUnavailable(1));
    }
    let law = HeterogeneousLaw::new(model, omega)?;
    solve_with_law(spectral, &law, xi, mass, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectorSummary {
    pub xi: Vec<f64>,
    #[serde(rename = "T")]
    pub mass: Mass,
    pub residual: f64,
    pub newton_iters: usize,
    pub seeds: Vec<u64>,
    pub flux_mean: Vec<f64>,
}

impl<S: Real> CorrectorState<S> {
    pub fn summary(&self, seeds: &[u64]) -> CorrectorSummary {
        CorrectorSummary {
            xi: self.xi.iter().map(|v| v.to_f64_lossy()).collect(),
            mass: self.mass,
            residual: self.residual,
            newton_iters: self.newton_iters,
            seeds: seeds.to_vec(),
            flux_mean: self.flux.mean().iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    /// Writes `phi.fld`, `grad_phi.fld`, `flux.fld`, `lin_coeff.fld` and `summary.json`.
    pub fn save(&self, dir: impl AsRef<Path>, seeds: &[u64]) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_field(dir.join("phi.fld"), &self.phi)?;
        write_field(dir.join("grad_phi.fld"), &self.grad_phi)?;
        write_field(dir.join("flux.fld"), &self.flux)?;
        write_field(dir.join("lin_coeff.fld"), &self.lin_coeff)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary(seeds))?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CorrectorSummary)> {
        let dir = dir.as_ref();
        let summary: CorrectorSummary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
        let state = Self {
            xi: summary.xi.iter().map(|&v| S::of(v)).collect(),
            mass: summary.mass,
            phi: read_field(dir.join("phi.fld"))?,
            grad_phi: read_field(dir.join("grad_phi.fld"))?,
            flux: read_field(dir.join("flux.fld"))?,
            lin_coeff: read_field(dir.join("lin_coeff.fld"))?,
            residual: summary.residual,
            newton_iters: summary.newton_iters,
            history: Vec::new(),
        };
        Ok((state, summary))
    }
}
