use std::time::Instant;

use crate::config::RunConfig;
use crate::corrector::{solve_nonlinear, HeterogeneousLaw};
use crate::error::{Error, Result};
use crate::grid::{ball_average, GridField, Mass, Spectral};
use crate::hierarchy::{solve_psi, solve_sigma, CorrectorFamily, DirectionSet};
use crate::homogenize::{check_failures, map_samples, quenched_taylor_study, Ensemble};
use crate::seeds;
use crate::sensitivity::{fd_sensitivity_check, Perturbation};

use super::{fit_linear, mu_star, Check, PointStat, RunRecord};

fn require<'a, T>(block: &'a Option<T>, key: &str) -> Result<&'a T> {
    block.as_ref().ok_or_else(|| Error::InvalidParameter(format!("config block {key:?} is required")))
}

pub(super) fn ensemble(cfg: &RunConfig) -> Result<Ensemble> {
    cfg.ensemble()
}

/// Node average of the squared magnitude over all components.
fn mean_square(f: &GridField<f64>) -> f64 {
    f.values().iter().map(|v| v * v).sum::<f64>() / f.grid().nodes() as f64
}

fn positive_ladder(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() || xs.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::InvalidParameter(format!("{name} must be a non-empty list of positive numbers")));
    }
    Ok(())
}

fn check_box(cfg: &RunConfig, t_max: f64) -> Result<()> {
    if cfg.grid.box_side < 10.0 * t_max.sqrt() {
        return Err(Error::InvalidParameter(format!(
            "box_side = {} is below 10 sqrt(T_max) = {}",
            cfg.grid.box_side,
            10.0 * t_max.sqrt()
        )));
    }
    Ok(())
}

/// Runs the per-sample closure, applies the failure rule and returns the
/// successful rows in index order.
fn sample_rows(cfg: &RunConfig, record: &mut RunRecord, f: impl Fn(u64) -> Result<Vec<f64>> + Sync) -> Result<Vec<Vec<f64>>> {
    let results = map_samples(cfg.samples, cfg.master_seed, |_, seed| f(seed));
    record.failed_samples = check_failures(&results)?;
    record.seeds = results.iter().map(|(s, _)| *s).collect();
    Ok(results.into_iter().filter_map(|(_, r)| r.ok()).collect())
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

/// Second moments of massive correctors and flux correctors on a `T` ladder.
pub fn run_scaling_in_t(cfg: &RunConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let sc = require(&cfg.scaling, "scaling")?;
    positive_ladder("scaling.t_values", &sc.t_values)?;
    check_box(cfg, sc.t_values.iter().fold(0.0, |m: f64, &t| m.max(t)))?;
    let ens = ensemble(cfg)?;
    let sp = Spectral::new(cfg.grid);
    let xi = cfg.xi();
    let d = cfg.grid.d;
    let mut rec = RunRecord::new("scaling-T", cfg);

    const PER_T: usize = 4;
    let rows = sample_rows(cfg, &mut rec, |seed| {
        let omega = ens.sample(seed)?;
        let mut row = Vec::with_capacity(PER_T * sc.t_values.len());
        for &t in &sc.t_values {
            let mass = Mass::new(t)?;
            let st = solve_nonlinear(&sp, &omega, &ens.model, &xi, mass, &ens.opts)?;
            row.push(mean_square(&sp.ball_average_field(&st.phi, sc.ball_radius)?));
            row.push(mean_square(&st.phi));
            row.push(if d >= 2 { mean_square(&solve_sigma(&sp, &st.flux, mass)?) } else { 0.0 });
            row.push(mean_square(&solve_psi(&sp, &st.flux, &st.grad_phi, mass)?) / t);
        }
        Ok(row)
    })?;
    let names = ["phi_ball_mean_sq", "phi_mean_sq", "sigma_mean_sq", "psi_mean_sq_over_T"];
    for (k, name) in names.iter().enumerate() {
        if *name == "sigma_mean_sq" && d < 2 {
            continue;
        }
        for (j, &t) in sc.t_values.iter().enumerate() {
            rec.points.push(PointStat::from_samples(name, t, &column(&rows, PER_T * j + k)));
        }
    }

    let means: Vec<f64> = rec.series("phi_mean_sq").iter().map(|p| p.mean).collect();
    let mu2: Vec<f64> = sc.t_values.iter().map(|&t| mu_star(t.sqrt(), d).map(|m| m * m)).collect::<Result<_>>()?;
    rec.notes = serde_json::json!({ "mu_star_sq": mu2 });
    if sc.t_values.len() >= 3 {
        let fit = rec.fit_series("phi_mean_sq", "T")?;
        rec.fit_series("phi_ball_mean_sq", "T")?;
        match d {
            1 => {
                rec.check(Check::within("phi_mean_sq slope vs T", fit.slope, Some(0.4), Some(0.6), true));
                rec.check(Check::within("phi_mean_sq r2", fit.r2, Some(0.95), None, true));
            }
            2 => {
                let logs: Vec<f64> = sc.t_values.iter().map(|t| t.ln()).collect();
                let (_, _, r2) = fit_linear(&logs, &means)?;
                rec.check(Check::within("phi_mean_sq linear in log T, r2", r2, Some(0.9), None, false));
            }
            _ => {}
        }
    }
    if d >= 3 && means.len() >= 2 {
        let lo = means[0];
        let hi = means[means.len() - 1];
        rec.check(Check::within("phi_mean_sq ratio T_max / T_min", hi / lo, None, Some(1.5), true));
    }
    Ok(rec.finish(started))
}

/// Matched-seed differences between massive approximations at `T` and `2T`.
pub fn run_t_convergence(cfg: &RunConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let cc = require(&cfg.convergence, "convergence")?;
    positive_ladder("convergence.t_values", &cc.t_values)?;
    check_box(cfg, cc.t_values.iter().fold(0.0, |m: f64, &t| m.max(t)))?;
    let ens = ensemble(cfg)?;
    let sp = Spectral::new(cfg.grid);
    let xi = cfg.xi();
    let d = cfg.grid.d;
    let dirs = match &cc.direction {
        Some(e) => Some(DirectionSet::normalized(vec![e.clone()])?),
        None => None,
    };
    let mut masses: Vec<f64> = cc.t_values.iter().flat_map(|&t| [t, 2.0 * t]).collect();
    masses.sort_by(f64::total_cmp);
    masses.dedup();
    let slot = |t: f64| masses.iter().position(|&m| m == t).expect("mass in ladder");
    let mut rec = RunRecord::new("t-convergence", cfg);

    const PER_T: usize = 3;
    let rows = sample_rows(cfg, &mut rec, |seed| {
        let omega = ens.sample(seed)?;
        let law = HeterogeneousLaw::new(&ens.model, &omega)?;
        let mut solved = Vec::with_capacity(masses.len());
        for &t in &masses {
            let st = solve_nonlinear(&sp, &omega, &ens.model, &xi, Mass::new(t)?, &ens.opts)?;
            let flux_mean = st.flux.mean();
            let grad = st.grad_phi.clone();
            let lin = match &dirs {
                Some(b) => {
                    let mut fam = CorrectorFamily::new(st, b.clone())?;
                    fam.solve(&sp, &law, 1, &ens.opts)?;
                    Some(fam.grad_phi(1)?.clone())
                }
                None => None,
            };
            solved.push((grad, flux_mean, lin));
        }
        let mut row = Vec::with_capacity(PER_T * cc.t_values.len());
        for &t in &cc.t_values {
            let (a, b) = (&solved[slot(t)], &solved[slot(2.0 * t)]);
            row.push(mean_square(&b.0.sub(&a.0)?));
            row.push(match (&a.2, &b.2) {
                (Some(la), Some(lb)) => mean_square(&lb.sub(la)?),
                _ => 0.0,
            });
            row.push(a.1.iter().zip(&b.1).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt());
        }
        Ok(row)
    })?;
    let names = ["grad_diff_sq", "linearized_grad_diff_sq", "flux_mean_diff"];
    for (k, name) in names.iter().enumerate() {
        if k == 1 && dirs.is_none() {
            continue;
        }
        for (j, &t) in cc.t_values.iter().enumerate() {
            rec.points.push(PointStat::from_samples(name, t, &column(&rows, PER_T * j + k)));
        }
    }
    if cc.t_values.len() >= 3 {
        let window = match d {
            1 => Some((-0.5, 0.15)),
            3 => Some((-1.0, 0.2)),
            _ => None,
        };
        let gated: &[&str] = if dirs.is_some() { &names[..2] } else { &names[..1] };
        for name in gated {
            let fit = rec.fit_series(name, "T")?;
            match window {
                Some((s, tol)) => {
                    rec.check(Check::within(format!("{name} slope vs T"), fit.slope, Some(s - tol), Some(s + tol), true));
                    rec.check(Check::within(format!("{name} r2"), fit.r2, Some(0.9), None, true));
                }
                None => {
                    let xs: Vec<f64> = cc.t_values.iter().map(|&t| mu_star(t.sqrt(), d).map(|m| m * m / t)).collect::<Result<_>>()?;
                    let ys: Vec<f64> = rec.series(name).iter().map(|p| p.mean).collect();
                    let f = super::fit_loglog(&xs, &ys)?;
                    rec.check(Check::within(format!("{name} slope vs mu_star^2 / T"), f.slope, Some(0.8), Some(1.2), false));
                }
            }
        }
    }
    Ok(rec.finish(started))
}

/// Growth of ball averages of the anchored corrector in one dimension.
pub fn run_growth_d1(cfg: &RunConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let gc = require(&cfg.growth, "growth")?;
    if cfg.grid.d != 1 || !cfg.mass.is_infinite() {
        return Err(Error::InvalidParameter("growth-d1 needs d = 1 and T = inf".into()));
    }
    if gc.offsets.iter().any(|&x| !(x >= 0.0) || x > cfg.grid.box_side / 4.0) {
        return Err(Error::InvalidParameter("growth.offsets must lie in [0, box_side / 4]".into()));
    }
    let ens = ensemble(cfg)?;
    let sp = Spectral::new(cfg.grid);
    let xi = cfg.xi();
    let r = gc.ball_radius;
    let mut rec = RunRecord::new("growth-d1", cfg);
    let rows = sample_rows(cfg, &mut rec, |seed| {
        let omega = ens.sample(seed)?;
        let st = solve_nonlinear(&sp, &omega, &ens.model, &xi, ens.mass, &ens.opts)?;
        let anchor = ball_average(&st.phi, &[0.0], r)?[0];
        let mut row = Vec::with_capacity(2 * gc.offsets.len());
        for &x in &gc.offsets {
            for c in [x, cfg.grid.box_side - x] {
                let y = ball_average(&st.phi, &[c % cfg.grid.box_side], r)?[0] - anchor;
                row.push(y * y);
            }
        }
        Ok(row)
    })?;
    for (j, &x) in gc.offsets.iter().enumerate() {
        let pos = column(&rows, 2 * j);
        let neg = column(&rows, 2 * j + 1);
        let both: Vec<f64> = pos.iter().zip(&neg).map(|(a, b)| 0.5 * (a + b)).collect();
        let (p, n) = (PointStat::from_samples("increment_sq_pos", x, &pos), PointStat::from_samples("increment_sq_neg", x, &neg));
        if x > 0.0 {
            let bound = 3.0 * (p.stderr.powi(2) + n.stderr.powi(2)).sqrt();
            rec.check(Check::within(format!("symmetry at |x0| = {x}"), (p.mean - n.mean).abs(), None, Some(bound), true));
        } else {
            rec.check(Check::within("anchored at x0 = 0", p.mean, None, Some(0.0), true));
        }
        rec.points.push(p);
        rec.points.push(n);
        rec.points.push(PointStat::from_samples("increment_sq", 1.0 + x, &both));
    }
    if gc.offsets.iter().filter(|&&x| x > 0.0).count() >= 3 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rec.series("increment_sq").iter().filter(|p| p.x > 1.0).map(|p| (p.x, p.mean)).unzip();
        let fit = super::fit_loglog(&xs, &ys)?;
        rec.fits.push(super::FitEntry { series: "increment_sq".into(), against: "1 + |x0|".into(), fit: fit.clone() });
        rec.check(Check::within("increment_sq slope vs 1 + |x0|", fit.slope, Some(0.8), Some(1.2), true));
        rec.check(Check::within("increment_sq r2", fit.r2, Some(0.9), None, true));
    }
    Ok(rec.finish(started))
}

/// Second moment of ball averages of `grad phi . e` over a radius ladder,
/// estimated with all ball centers of each sample.
pub fn run_variance_decay(cfg: &RunConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let vc = require(&cfg.variance, "variance")?;
    positive_ladder("variance.radii", &vc.radii)?;
    if vc.radii.iter().any(|&r| r > cfg.grid.box_side / 4.0) {
        return Err(Error::InvalidParameter("variance.radii must not exceed box_side / 4".into()));
    }
    let ens = ensemble(cfg)?;
    let sp = Spectral::new(cfg.grid);
    let xi = cfg.xi();
    let d = cfg.grid.d;
    let e = DirectionSet::normalized(vec![vc.direction.clone()])?.vector(0).to_vec();
    let mut rec = RunRecord::new("variance-decay", cfg);
    let rows = sample_rows(cfg, &mut rec, |seed| {
        let omega = ens.sample(seed)?;
        let st = solve_nonlinear(&sp, &omega, &ens.model, &xi, ens.mass, &ens.opts)?;
        let g = st.grad_phi.dot_const(&e);
        vc.radii.iter().map(|&r| Ok(mean_square(&sp.ball_average_field(&g, r)?))).collect()
    })?;
    for (j, &r) in vc.radii.iter().enumerate() {
        rec.points.push(PointStat::from_samples("ball_mean_sq", r, &column(&rows, j)));
    }
    if vc.radii.len() >= 3 && rec.series("ball_mean_sq").iter().all(|p| p.mean > 0.0) {
        let fit = rec.fit_series("ball_mean_sq", "R")?;
        let blocking = d <= 2;
        let target = -(d as f64);
        rec.check(Check::within("ball_mean_sq slope vs R", fit.slope, Some(target - 0.4), Some(target + 0.4), blocking));
        rec.check(Check::within("ball_mean_sq r2", fit.r2, Some(0.9), None, blocking));
    }
    Ok(rec.finish(started))
}

/// Quenched Taylor remainders of correctors around `xi0` on one sample.
pub fn run_taylor(cfg: &RunConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let tc = require(&cfg.taylor, "taylor")?;
    positive_ladder("taylor.steps", &tc.steps)?;
    let ens = ensemble(cfg)?;
    let seed = seeds::split(cfg.master_seed, 0);
    let omega = ens.sample(seed)?;
    let xi0 = tc.xi0.clone().unwrap_or_else(|| cfg.xi());
    let mut rec = RunRecord::new("taylor", cfg);
    rec.seeds = vec![seed];
    for &k in &tc.orders {
        let rems = quenched_taylor_study(&ens, &omega, &xi0, &tc.direction, k, &tc.steps)?;
        for r in &rems {
            rec.points.push(PointStat::from_samples(&format!("grad_remainder_K{k}"), r.step, &[r.grad_phi_l2]));
            rec.points.push(PointStat::from_samples(&format!("phi_remainder_K{k}"), r.step, &[r.phi_l2]));
            if let Some(s) = r.sigma_l2.filter(|_| cfg.grid.d >= 2) {
                rec.points.push(PointStat::from_samples(&format!("sigma_remainder_K{k}"), r.step, &[s]));
            }
        }
        if tc.steps.len() >= 3 {
            let fit = rec.fit_series(&format!("grad_remainder_K{k}"), "|xi - xi0|")?;
            rec.check(Check::within(format!("grad_remainder_K{k} order"), fit.slope, Some(k as f64 + 0.8), None, true));
            rec.check(Check::within(format!("grad_remainder_K{k} r2"), fit.r2, Some(0.9), None, false));
        }
    }
    Ok(rec.finish(started))
}

/// Quenched check of the derivative representation
/// `A(xi + h e) - A(xi) - h <q_{xi,e}> = O(h^2)` on one sample.
pub fn run_derivative_representation(cfg: &RunConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let dc = require(&cfg.derivative, "derivative")?;
    positive_ladder("derivative.steps", &dc.steps)?;
    let ens = ensemble(cfg)?;
    let sp = Spectral::new(cfg.grid);
    let seed = seeds::split(cfg.master_seed, 0);
    let omega = ens.sample(seed)?;
    let xi = cfg.xi();
    let dirs = DirectionSet::normalized(vec![dc.direction.clone()])?;
    let e = dirs.vector(0).to_vec();
    let fam = ens.family(&sp, &omega, &xi, &dirs)?;
    let a0 = fam.base.flux.mean();
    let qe = fam.flux(1)?.mean();
    let mut rec = RunRecord::new("derivative", cfg);
    rec.seeds = vec![seed];
    for &h in &dc.steps {
        let moved: Vec<f64> = xi.iter().zip(&e).map(|(x, v)| x + h * v).collect();
        let st = solve_nonlinear(&sp, &omega, &ens.model, &moved, ens.mass, &ens.opts)?;
        let a = st.flux.mean();
        let err = (0..xi.len()).map(|i| (a[i] - a0[i] - h * qe[i]).powi(2)).sum::<f64>().sqrt();
        rec.points.push(PointStat::from_samples("representation_error", h, &[err]));
    }
    rec.notes = serde_json::json!({ "flux_mean": a0, "linearized_flux_mean": qe });
    if dc.steps.len() >= 3 {
        let fit = rec.fit_series("representation_error", "h")?;
        rec.check(Check::within("representation_error order", fit.slope, Some(1.9), None, true));
        rec.check(Check::within("representation_error r2", fit.r2, Some(0.9), None, false));
    }
    Ok(rec.finish(started))
}

/// Finite-difference validation of parameter-field variations for the base
/// corrector and the first linearized corrector.
pub fn run_sensitivity(cfg: &RunConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let sc = require(&cfg.sensitivity, "sensitivity")?;
    positive_ladder("sensitivity.steps", &sc.steps)?;
    let ens = ensemble(cfg)?;
    let sp = Spectral::new(cfg.grid);
    let seed = seeds::split(cfg.master_seed, 0);
    let omega = ens.sample(seed)?;
    let pert = Perturbation::from_config(&cfg.grid, sc)?;
    let first = cfg.direction_set()?.vector(0).to_vec();
    let dirs = DirectionSet::new(vec![first])?;
    let xi = cfg.xi();
    let t_min = sc.steps.iter().fold(f64::INFINITY, |m, &t| m.min(t));
    let mut rec = RunRecord::new("sensitivity-check", cfg);
    rec.seeds = vec![seed];
    let mut notes = Vec::new();
    for s in [0u32, 1] {
        let rep = fd_sensitivity_check(&sp, &omega, &ens.model, &xi, ens.mass, Some(&dirs), s, &pert, &sc.steps, &ens.opts)?;
        let name = format!("relative_error_S{s}");
        for (&t, &err) in rep.steps.iter().zip(&rep.errors) {
            rec.points.push(PointStat::from_samples(&name, t, &[err]));
        }
        let at_min = rep.steps.iter().zip(&rep.errors).find(|(t, _)| **t == t_min).map(|(_, e)| *e).unwrap_or(f64::NAN);
        rec.check(Check::within(format!("{name} at t = {t_min:e}"), at_min, None, Some(1e-3), true));
        if sc.steps.len() >= 3 {
            rec.check(Check::within(format!("{name} order"), rep.fitted_order, Some(0.9), None, true));
        }
        notes.push(serde_json::json!({ "subset": rep.subset, "prescale": rep.prescale, "delta_phi_l2": rep.delta_phi_l2, "r2": rep.r2 }));
    }
    rec.notes = serde_json::Value::Array(notes);
    Ok(rec.finish(started))
}
