//! Two-scale expansion on the unit torus. Lengths are measured in the fast
//! variable `y = x / eps`, so every problem lives on the torus of side
//! `1 / eps` and the slow forcing is `f(eps y)`.
//!
//! The homogenized law and the correctors are tabulated on a regular grid in
//! `xi` from the same realization and interpolated with tensor-product cubic
//! Hermite polynomials; the mixed derivatives at the table nodes are the
//! spatial means of the linearized fluxes and the linearized correctors along
//! the coordinate axes.

use std::time::Instant;

use rayon::prelude::*;

use crate::config::{unit_vector, RunConfig, TwoScaleConfig};
use crate::corrector::{solve_with_law, ConstitutiveLaw, HeterogeneousLaw};
use crate::error::{Error, Result};
use crate::field::ParameterField;
use crate::grid::{GridField, Mass, Rank, Spectral, TorusGrid};
use crate::hierarchy::{CorrectorFamily, DirectionSet};
use crate::homogenize::{check_failures, map_samples, Ensemble};
use crate::seeds;

use super::studies::ensemble;
use super::{Check, PointStat, RunRecord};

/// `h00, h01` (value basis) and `h10, h11` (slope basis) with their `t`-derivatives.
fn hermite(t: f64) -> ([f64; 2], [f64; 2], [f64; 2], [f64; 2]) {
    let (t2, t3) = (t * t, t * t * t);
    let value = [2.0 * t3 - 3.0 * t2 + 1.0, -2.0 * t3 + 3.0 * t2];
    let slope = [t3 - 2.0 * t2 + t, t3 - t2];
    let dvalue = [6.0 * t2 - 6.0 * t, -6.0 * t2 + 6.0 * t];
    let dslope = [3.0 * t2 - 4.0 * t + 1.0, 3.0 * t2 - 2.0 * t];
    (value, slope, dvalue, dslope)
}

/// Tensor-product cubic Hermite data on `[-w, w]^d` with spacing `h`.
///
/// Node `j` stores, for every subset `S` of the axes, the mixed derivative
/// `d_S A(xi_j)` and optionally the corrector field `d_S phi_{xi_j}`.
pub struct HermiteTable {
    pub d: usize,
    pub step: f64,
    pub half_width: f64,
    per_axis: usize,
    /// `[node][subset]`, each a vector in `R^d`.
    values: Vec<Vec<Vec<f64>>>,
    fields: Vec<Vec<GridField<f64>>>,
}

impl HermiteTable {
    /// Table nodes `xi_j` in row-major order, axis 0 slowest.
    pub fn nodes(d: usize, step: f64, half_width: f64) -> Result<Vec<Vec<f64>>> {
        if !(step > 0.0 && half_width >= step) {
            return Err(Error::InvalidParameter(format!("table needs 0 < step <= half_width, got {step}, {half_width}")));
        }
        let per_axis = 2 * (half_width / step).round() as usize + 1;
        let total = per_axis.pow(d as u32);
        Ok((0..total)
            .map(|mut j| {
                let mut xi = vec![0.0; d];
                for a in (0..d).rev() {
                    xi[a] = -half_width + (j % per_axis) as f64 * step;
                    j /= per_axis;
                }
                xi
            })
            .collect())
    }

    /// Builds the table from per-node derivative data in the order of [`Self::nodes`].
    pub fn from_data(d: usize, step: f64, half_width: f64, values: Vec<Vec<Vec<f64>>>, fields: Vec<Vec<GridField<f64>>>) -> Result<Self> {
        let per_axis = 2 * (half_width / step).round() as usize + 1;
        let total = per_axis.pow(d as u32);
        if values.len() != total || values.iter().any(|v| v.len() != 1 << d) || !(fields.is_empty() || fields.len() == total) {
            return Err(Error::ShapeMismatch("table data does not match its node layout".into()));
        }
        Ok(Self { d, step, half_width, per_axis, values, fields })
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().all(|v| v.abs() <= self.half_width + 1e-12)
    }

    /// Cell base index and local coordinate per axis; outside points
    /// extrapolate with the boundary cell.
    fn locate(&self, p: &[f64]) -> (Vec<usize>, Vec<f64>) {
        let mut base = Vec::with_capacity(self.d);
        let mut t = Vec::with_capacity(self.d);
        for &v in &p[..self.d] {
            let u = (v + self.half_width) / self.step;
            let i = (u.floor().max(0.0) as usize).min(self.per_axis - 2);
            base.push(i);
            t.push(u - i as f64);
        }
        (base, t)
    }

    /// Calls `f(node, subset, weight, d weight / d p)` for every contributing term.
    fn for_each_term(&self, p: &[f64], mut f: impl FnMut(usize, usize, f64, &[f64])) {
        let d = self.d;
        let (base, t) = self.locate(p);
        let basis: Vec<_> = t.iter().map(|&s| hermite(s)).collect();
        let mut grad = vec![0.0; d];
        for corner in 0..(1usize << d) {
            let mut node = 0;
            for (a, b) in base.iter().enumerate() {
                node = node * self.per_axis + b + ((corner >> a) & 1);
            }
            for subset in 0..(1usize << d) {
                let mut w = 1.0;
                let mut factors = [0.0; 3];
                let mut dfactors = [0.0; 3];
                for a in 0..d {
                    let c = (corner >> a) & 1;
                    let (v, s, dv, ds) = basis[a];
                    let (fa, dfa) = if (subset >> a) & 1 == 1 { (self.step * s[c], ds[c]) } else { (v[c], dv[c] / self.step) };
                    factors[a] = fa;
                    dfactors[a] = dfa;
                    w *= fa;
                }
                for (a, g) in grad.iter_mut().enumerate() {
                    *g = dfactors[a] * (0..d).filter(|&b| b != a).map(|b| factors[b]).product::<f64>();
                }
                f(node, subset, w, &grad);
            }
        }
    }

    /// Interpolated `A(p)` and its row-major Jacobian.
    pub fn evaluate(&self, p: &[f64], value: &mut [f64], jacobian: Option<&mut [f64]>) {
        let d = self.d;
        value[..d].iter_mut().for_each(|v| *v = 0.0);
        let mut jac = [0.0; 9];
        self.for_each_term(p, |node, subset, w, g| {
            let data = &self.values[node][subset];
            for i in 0..d {
                value[i] += w * data[i];
                for j in 0..d {
                    jac[i * d + j] += g[j] * data[i];
                }
            }
        });
        if let Some(out) = jacobian {
            out[..d * d].copy_from_slice(&jac[..d * d]);
        }
    }

    /// Node-wise `phi_{xi(x)}(x)` for a vector field `xi` on the corrector grid.
    pub fn corrector_at(&self, xi: &GridField<f64>) -> Result<GridField<f64>> {
        if self.fields.is_empty() {
            return Err(Error::InvalidParameter("table holds no corrector fields".into()));
        }
        let grid = *xi.grid();
        let mut out = vec![0.0; grid.nodes()];
        let mut p = vec![0.0; self.d];
        for (x, o) in out.iter_mut().enumerate() {
            xi.node_into(x, &mut p);
            self.for_each_term(&p, |node, subset, w, _| *o += w * self.fields[node][subset].values()[x]);
        }
        GridField::from_values(grid, Rank::Scalar, out)
    }
}

/// `x -> A_table(p) + f(x)` with a tabulated homogeneous law.
pub struct TabulatedLaw<'a> {
    pub table: &'a HermiteTable,
    pub grid: TorusGrid,
    pub forcing: Option<&'a GridField<f64>>,
}

impl ConstitutiveLaw<f64> for TabulatedLaw<'_> {
    fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    fn flux(&self, node: usize, p: &[f64], out: &mut [f64]) {
        self.table.evaluate(p, out, None);
        if let Some(f) = self.forcing {
            for (i, o) in out.iter_mut().enumerate().take(self.table.d) {
                *o += f.at(i, node);
            }
        }
    }

    fn jacobian(&self, _node: usize, p: &[f64], out: &mut [f64]) {
        let mut v = [0.0; 3];
        self.table.evaluate(p, &mut v, Some(out));
    }
}

/// Table of homogenized law and correctors from one realization.
fn tabulate(ens: &Ensemble, sp: &Spectral<f64>, omega: &ParameterField<f64>, tc: &TwoScaleConfig) -> Result<HermiteTable> {
    let d = ens.grid.d;
    let nodes = HermiteTable::nodes(d, tc.table_step, tc.table_half_width)?;
    let dirs = DirectionSet::new((0..d).map(|a| unit_vector(d, a)).collect())?;
    let solved: Vec<Result<(Vec<Vec<f64>>, Vec<GridField<f64>>)>> = nodes
        .par_iter()
        .map(|xi| {
            let fam: CorrectorFamily<f64> = ens.family(sp, omega, xi, &dirs)?;
            let mut values = Vec::with_capacity(1 << d);
            let mut fields = Vec::with_capacity(1 << d);
            for s in 0..(1u32 << d) {
                values.push(fam.flux(s)?.mean());
                fields.push(fam.phi(s)?.clone());
            }
            Ok((values, fields))
        })
        .collect();
    let (values, fields): (Vec<_>, Vec<_>) = solved.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    HermiteTable::from_data(d, tc.table_step, tc.table_half_width, values, fields)
}

struct ScaleOutcome {
    rel_h1: f64,
    rel_l2: f64,
    outside: f64,
    newton_micro: usize,
    newton_hom: usize,
}

fn one_scale(ens: &Ensemble, tc: &TwoScaleConfig, eps: f64, seed: u64) -> Result<ScaleOutcome> {
    let d = ens.grid.d;
    let periods = (1.0 / eps).round();
    if (periods * eps - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!("1 / eps must be an integer, got eps = {eps}")));
    }
    let grid = TorusGrid::new(d, tc.nodes_per_unit * periods as usize, periods)?;
    let sp = Spectral::new(grid);
    let mut ens = ens.clone();
    ens.grid = grid;
    ens.mass = Mass::INFINITE;
    let omega = ens.sample(seed)?;

    let mut forcing = GridField::zeros(grid, Rank::Vector);
    for node in 0..grid.nodes() {
        let y = grid.coords(node);
        for a in 0..d {
            forcing.component_mut(a)[node] = tc.forcing_amplitude * (2.0 * std::f64::consts::PI * eps * y[a]).sin();
        }
    }
    let zero = vec![0.0; d];
    let micro_law = HeterogeneousLaw::new(&ens.model, &omega)?.with_forcing(&forcing);
    let micro = solve_with_law(&sp, &micro_law, &zero, Mass::INFINITE, &ens.opts)?;

    let table = tabulate(&ens, &sp, &omega, tc)?;
    let hom_law = TabulatedLaw { table: &table, grid, forcing: Some(&forcing) };
    let hom = solve_with_law(&sp, &hom_law, &zero, Mass::INFINITE, &ens.opts)?;

    let mut p = vec![0.0; d];
    let outside = (0..grid.nodes())
        .filter(|&x| {
            hom.grad_phi.node_into(x, &mut p);
            !table.contains(&p)
        })
        .count() as f64
        / grid.nodes() as f64;
    let mut w = table.corrector_at(&hom.grad_phi)?;
    w.axpy(1.0, &hom.phi)?;
    let mut err = micro.phi.sub(&w)?;
    err.remove_mean();
    let mut u = micro.phi.clone();
    u.remove_mean();
    Ok(ScaleOutcome {
        rel_h1: sp.gradient(&err)?.l2_norm() / micro.grad_phi.l2_norm(),
        rel_l2: err.l2_norm() / u.l2_norm(),
        outside,
        newton_micro: micro.newton_iters,
        newton_hom: hom.newton_iters,
    })
}

/// Relative `H^1` and `L^2` errors of the first-order two-scale expansion
/// along an `eps` ladder, one quenched realization per `eps`.
pub fn run_two_scale(cfg: &RunConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let tc = cfg.two_scale.as_ref().ok_or_else(|| Error::InvalidParameter("config block \"two_scale\" is required".into()))?;
    if tc.epsilons.is_empty() || tc.epsilons.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::InvalidParameter("two_scale.epsilons must lie in (0, 1]".into()));
    }
    let ens = ensemble(cfg)?;
    if ens.model.max_order < cfg.grid.d + 1 {
        return Err(Error::OrderUnavailable(cfg.grid.d + 1));
    }
    let mut rec = RunRecord::new("two-scale", cfg);
    let mut notes = Vec::new();
    let mut outcomes = Vec::new();
    for (k, &eps) in tc.epsilons.iter().enumerate() {
        let results = map_samples(cfg.samples, seeds::split(cfg.master_seed, k as u64), |_, seed| one_scale(&ens, tc, eps, seed));
        rec.failed_samples += check_failures(&results)?;
        let ok: Vec<&ScaleOutcome> = results.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
        rec.seeds.extend(results.iter().map(|(s, _)| *s));
        let h1: Vec<f64> = ok.iter().map(|o| o.rel_h1).collect();
        let l2: Vec<f64> = ok.iter().map(|o| o.rel_l2).collect();
        let outside: Vec<f64> = ok.iter().map(|o| o.outside).collect();
        let h1_stat = PointStat::from_samples("rel_h1_error", eps, &h1);
        rec.points.push(h1_stat.clone());
        rec.points.push(PointStat::from_samples("rel_l2_error", eps, &l2));
        rec.points.push(PointStat::from_samples("outside_table_fraction", eps, &outside));
        notes.push(serde_json::json!({
            "eps": eps,
            "newton_micro": ok.iter().map(|o| o.newton_micro).collect::<Vec<_>>(),
            "newton_homogenized": ok.iter().map(|o| o.newton_hom).collect::<Vec<_>>(),
        }));
        let worst_gap = ok.iter().map(|o| o.rel_l2 - o.rel_h1).fold(f64::NEG_INFINITY, f64::max);
        rec.check(Check::within(format!("L2 <= H1 at eps = {eps}"), worst_gap, None, Some(0.0), true));
        let worst_outside = outside.iter().copied().fold(0.0, f64::max);
        rec.check(Check::within(format!("table covers grad u_hom at eps = {eps}"), worst_outside, None, Some(0.0), false));
        outcomes.push((eps, h1_stat.mean, h1.iter().copied().fold(0.0, f64::max)));
    }
    let constant = cfg.field.amplitude == 0.0;
    if constant {
        for &(eps, _, worst) in &outcomes {
            rec.check(Check::within(format!("constant-parameter H1 error at eps = {eps}"), worst, None, Some(1e-6), true));
        }
    } else {
        let mut sorted = outcomes.clone();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        for pair in sorted.windows(2) {
            let (coarse, fine) = (pair[0], pair[1]);
            rec.check(Check::within(format!("mean H1 error decreases from eps = {} to {}", coarse.0, fine.0), fine.1 - coarse.1, None, Some(0.0), true));
        }
    }
    rec.notes = serde_json::Value::Array(notes);
    Ok(rec.finish(started))
}
