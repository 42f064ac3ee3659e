//! Variations of correctors under smooth, compactly supported perturbations
//! of the parameter field, and their finite-difference verification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corrector::{solve_nonlinear, HeterogeneousLaw, SolverOptions};
use crate::error::{Error, Result};
use crate::experiments::fit_loglog;
use crate::field::ParameterField;
use crate::grid::{elliptic_solve, GridField, Mass, Rank, Spectral, TorusGrid};
use crate::hierarchy::{partitions_of, subset_label, CorrectorFamily, DirectionSet, Subset, MAX_ORDER};
use crate::operator::{OperatorModel, MAX_CHANNELS};
use crate::scalar::Real;

/// Smooth bump `scale * exp(1 - 1 / (1 - |x - c|^2 / r^2))` inside `B_r(c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<S> {
    pub delta: GridField<S>,
    pub center: Vec<f64>,
    pub radius: f64,
    pub scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Per-channel amplitude, Euclidean norm at most 1.
    pub scale: Vec<f64>,
    pub steps: Vec<f64>,
}

impl<S: Real> Perturbation<S> {
    pub fn bump(grid: &TorusGrid, center: &[f64], radius: f64, scale: &[f64]) -> Result<Self> {
        if center.len() != grid.d {
            return Err(Error::InvalidParameter("bump center has the wrong dimension".into()));
        }
        if !(radius > 0.0 && radius <= grid.box_side / 4.0) {
            return Err(Error::InvalidParameter(format!("bump radius {radius} must lie in (0, box_side/4]")));
        }
        let norm: f64 = scale.iter().map(|v| v * v).sum::<f64>().sqrt();
        if scale.is_empty() || norm > 1.0 {
            return Err(Error::InvalidParameter("bump scale must be nonempty with norm <= 1".into()));
        }
        let n = scale.len();
        let mut delta = GridField::zeros(*grid, Rank::Channels(n));
        for node in 0..grid.nodes() {
            let x = grid.coords(node);
            let rho2 = (grid.periodic_distance(&x[..grid.d], center) / radius).powi(2);
            if rho2 < 1.0 {
                let profile = (1.0 - 1.0 / (1.0 - rho2)).exp();
                let vals: Vec<S> = scale.iter().map(|&c| S::of(c * profile)).collect();
                delta.set_node(node, &vals);
            }
        }
        Ok(Self { delta, center: center.to_vec(), radius, scale: scale.to_vec() })
    }

    pub fn from_config(grid: &TorusGrid, cfg: &SensitivityConfig) -> Result<Self> {
        Self::bump(grid, &cfg.center, cfg.radius, &cfg.scale)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            delta: self.delta.scaled(S::of(c)),
            center: self.center.clone(),
            radius: self.radius,
            scale: self.scale.iter().map(|v| v * c).collect(),
        }
    }
}

/// Memoized solver for `delta phi_S`, recursing over subsets from the base case.
pub struct SensitivitySolver<'a, S: Real> {
    spectral: &'a Spectral<S>,
    family: &'a CorrectorFamily<S>,
    model: &'a OperatorModel<S>,
    omega: &'a ParameterField<S>,
    delta: &'a GridField<S>,
    opts: SolverOptions,
    cache: BTreeMap<Subset, (GridField<S>, GridField<S>)>,
}

impl<'a, S: Real> SensitivitySolver<'a, S> {
    pub fn new(
        spectral: &'a Spectral<S>,
        family: &'a CorrectorFamily<S>,
        model: &'a OperatorModel<S>,
        omega: &'a ParameterField<S>,
        perturbation: &'a Perturbation<S>,
        opts: &SolverOptions,
    ) -> Result<Self> {
        if perturbation.delta.rank() != Rank::Channels(model.n) || *perturbation.delta.grid() != *omega.grid() {
            return Err(Error::ShapeMismatch("perturbation does not match the parameter field".into()));
        }
        Ok(Self { spectral, family, model, omega, delta: &perturbation.delta, opts: *opts, cache: BTreeMap::new() })
    }

    /// `delta phi_s`, solving every needed subset first.
    pub fn solve(&mut self, s: Subset) -> Result<&GridField<S>> {
        if s != 0 && !self.family.contains(s) {
            return Err(Error::MissingSubcorrector(subset_label(s)));
        }
        let mut order: Vec<Subset> = std::iter::once(0).chain(sub_masks(s)).collect();
        order.sort_by_key(|t| (t.count_ones(), *t));
        order.dedup();
        for t in order {
            if !self.cache.contains_key(&t) {
                let rhs = self.assemble(t)?;
                let (dphi, _) = elliptic_solve(self.spectral, &self.family.base.lin_coeff, self.family.mass(), &rhs, None, &self.opts.elliptic())?;
                let grad = self.spectral.gradient(&dphi)?;
                self.cache.insert(t, (dphi, grad));
            }
        }
        Ok(&self.cache[&s].0)
    }

    /// Right-hand side flux of the variation equation for `s`: the variation
    /// of the linearized flux `q_s` minus the term `a grad delta phi_s`.
    fn assemble(&self, s: Subset) -> Result<GridField<S>> {
        let fam = self.family;
        let grid = *fam.base.phi.grid();
        let d = grid.d;
        let n = self.model.n;
        let law = HeterogeneousLaw::new(self.model, self.omega)?;
        let parts = if s == 0 { Vec::new() } else { partitions_of(s)? };
        let needs_order = parts.iter().map(|p| p.len() + 1).max().unwrap_or(1);
        if needs_order > self.model.max_order {
            return Err(Error::OrderUnavailable(needs_order));
        }

        let mut out = GridField::zeros(grid, Rank::Vector);
        let mut p = [S::zero(); 3];
        let mut dw = [S::zero(); MAX_CHANNELS];
        let mut w = [[S::zero(); 3]; MAX_ORDER + 1];
        let mut term = [S::zero(); 3];
        let mut g0 = [S::zero(); 3];
        for node in 0..grid.nodes() {
            let om = law.omega_at(node);
            let om = &om[..n];
            self.delta.node_into(node, &mut dw[..n]);
            fam.base.grad_phi.node_into(node, &mut p[..d]);
            (0..d).for_each(|i| p[i] = p[i] + fam.base.xi[i]);
            let mut acc = [S::zero(); 3];
            if s == 0 {
                self.model.d_omega_d_xi(om, &p[..d], &dw[..n], &[], &mut acc[..d])?;
                out.set_node(node, &acc[..d]);
                continue;
            }
            self.cache[&0].1.node_into(node, &mut g0[..d]);
            for part in &parts {
                let k = part.len();
                // slot 0 is reserved for a prepended direction
                for (slot, &b) in part.iter().enumerate() {
                    fam.grad_phi(b)?.node_into(node, &mut w[slot + 1][..d]);
                    if b.count_ones() == 1 {
                        let v = fam.dirs.vector(b.trailing_zeros() as usize);
                        (0..d).for_each(|i| w[slot + 1][i] = w[slot + 1][i] + v[i]);
                    }
                }
                let blocks: Vec<&[S]> = w[1..=k].iter().map(|x| &x[..d]).collect();
                self.model.d_omega_d_xi(om, &p[..d], &dw[..n], &blocks, &mut term[..d])?;
                (0..d).for_each(|i| acc[i] = acc[i] + term[i]);

                let mut with_base: Vec<&[S]> = Vec::with_capacity(k + 1);
                with_base.push(&g0[..d]);
                with_base.extend(blocks.iter().copied());
                self.model.d_xi(om, &p[..d], &with_base, &mut term[..d])?;
                (0..d).for_each(|i| acc[i] = acc[i] + term[i]);

                if k == 1 {
                    // the block s itself carries the unknown delta phi_s
                    continue;
                }
                for (slot, &b) in part.iter().enumerate() {
                    let mut gb = [S::zero(); 3];
                    self.cache.get(&b).ok_or_else(|| Error::MissingSubcorrector(subset_label(b)))?.1.node_into(node, &mut gb[..d]);
                    let mut replaced = blocks.clone();
                    replaced[slot] = &gb[..d];
                    self.model.d_xi(om, &p[..d], &replaced, &mut term[..d])?;
                    (0..d).for_each(|i| acc[i] = acc[i] + term[i]);
                }
            }
            out.set_node(node, &acc[..d]);
        }
        Ok(out)
    }
}

fn sub_masks(s: Subset) -> impl Iterator<Item = Subset> {
    (1..=s).filter(move |t| t & !s == 0)
}

/// `delta phi_s` for a solved family; `s = 0` is the base corrector.
pub fn solve_sensitivity<S: Real>(
    spectral: &Spectral<S>,
    family: &CorrectorFamily<S>,
    model: &OperatorModel<S>,
    omega: &ParameterField<S>,
    perturbation: &Perturbation<S>,
    s: Subset,
    opts: &SolverOptions,
) -> Result<GridField<S>> {
    let mut solver = SensitivitySolver::new(spectral, family, model, omega, perturbation, opts)?;
    Ok(solver.solve(s)?.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub subset: String,
    pub steps: Vec<f64>,
    /// `|(phi_s(omega + t delta) - phi_s(omega)) / t - delta phi_s| / |delta phi_s|`.
    pub errors: Vec<f64>,
    pub fitted_order: f64,
    pub r2: f64,
    pub delta_phi_l2: f64,
    /// Factor applied to the perturbation so every step stays in the unit ball.
    pub prescale: f64,
}

fn build_family(
    spectral: &Spectral<f64>,
    omega: &ParameterField<f64>,
    model: &OperatorModel<f64>,
    xi: &[f64],
    mass: Mass,
    dirs: Option<&DirectionSet<f64>>,
    opts: &SolverOptions,
) -> Result<CorrectorFamily<f64>> {
    let base = solve_nonlinear(spectral, omega, model, xi, mass, opts)?;
    let dirs = match dirs {
        Some(d) => d.clone(),
        None => {
            let mut e = vec![0.0; xi.len()];
            e[0] = 1.0;
            DirectionSet::new(vec![e])?
        }
    };
    let mut fam = CorrectorFamily::new(base, dirs)?;
    let law = HeterogeneousLaw::new(model, omega)?;
    fam.solve_all(spectral, &law, opts)?;
    Ok(fam)
}

/// Compares `delta phi_s` with difference quotients at each step `t` and fits
/// the order of the error in `t`.
#[allow(clippy::too_many_arguments)]
pub fn fd_sensitivity_check(
    spectral: &Spectral<f64>,
    omega: &ParameterField<f64>,
    model: &OperatorModel<f64>,
    xi: &[f64],
    mass: Mass,
    dirs: Option<&DirectionSet<f64>>,
    s: Subset,
    perturbation: &Perturbation<f64>,
    steps: &[f64],
    opts: &SolverOptions,
) -> Result<SensitivityReport> {
    let t_max = steps.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let n = model.n;
    let mut prescale = 1.0f64;
    let (mut w, mut dw) = (vec![0.0; n], vec![0.0; n]);
    for node in 0..omega.grid().nodes() {
        omega.node_into(node, &mut w);
        perturbation.delta.node_into(node, &mut dw);
        let dn = dw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dn > 0.0 {
            let room = 1.0 - w.iter().map(|v| v * v).sum::<f64>().sqrt();
            prescale = prescale.min(0.5 * room / (t_max * dn));
        }
    }
    let pert = perturbation.scaled(prescale);

    let fam = build_family(spectral, omega, model, xi, mass, dirs, opts)?;
    let dphi = solve_sensitivity(spectral, &fam, model, omega, &pert, s, opts)?;
    let dnorm = dphi.l2_norm();
    if dnorm == 0.0 {
        return Err(Error::InvalidParameter("variation vanishes; nothing to compare".into()));
    }
    let mut errors = Vec::with_capacity(steps.len());
    for &t in steps {
        let moved = omega.perturbed(&pert.delta, t)?;
        let fam_t = build_family(spectral, &moved, model, xi, mass, dirs, opts)?;
        let mut quotient = fam_t.phi(s)?.sub(fam.phi(s)?)?;
        quotient.scale(1.0 / t);
        errors.push(quotient.sub(&dphi)?.l2_norm() / dnorm);
    }
    let (fitted_order, r2) = match fit_loglog(steps, &errors) {
        Ok(f) => (f.slope, f.r2),
        Err(_) => (f64::NAN, f64::NAN),
    };
    Ok(SensitivityReport { subset: subset_label(s), steps: steps.to_vec(), errors, fitted_order, r2, delta_phi_l2: dnorm, prescale })
}
