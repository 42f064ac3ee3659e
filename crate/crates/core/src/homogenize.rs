//! Monte-Carlo estimates of the homogenized operator, its directional
//! derivatives through linearized flux averages, and Taylor remainders of
//! correctors on a fixed realization.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{solve_nonlinear, HeterogeneousLaw, SolverOptions};
use crate::error::{Error, Result};
use crate::field::{sample_parameter_field, FieldSpec, ParameterField};
use crate::grid::{GridField, Mass, Spectral, TorusGrid};
use crate::hierarchy::{solve_sigma, CorrectorFamily, DirectionSet, Subset};
use crate::operator::OperatorModel;
use crate::seeds;

/// Largest tolerated fraction of failed samples.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedEstimate {
    pub xi: Vec<f64>,
    pub direction: Option<Vec<Vec<f64>>>,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
    pub failed: usize,
    #[serde(rename = "T")]
    pub mass: Mass,
    pub seeds: Vec<u64>,
}

/// Per-sample outcome, one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub seed: u64,
    pub value: Vec<f64>,
    pub residual: f64,
    pub error: Option<String>,
}

/// Runs `f(index, seed)` for `count` samples with `seed = split(master, index)`
/// on the current rayon pool; results keep index order.
pub fn map_samples<T: Send>(count: usize, master_seed: u64, f: impl Fn(usize, u64) -> Result<T> + Sync) -> Vec<(u64, Result<T>)> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = seeds::split(master_seed, i as u64);
            (seed, f(i, seed))
        })
        .collect()
}

/// Applies the partial-failure rule: more than 10% failures is an error.
pub fn check_failures<T>(results: &[(u64, Result<T>)]) -> Result<usize> {
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    if failed as f64 > MAX_FAILURE_FRACTION * results.len() as f64 || failed == results.len() {
        let first = results.iter().find_map(|(_, r)| r.as_ref().err()).map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::TooManyFailures { failed, total: results.len(), first });
    }
    if failed > 0 {
        log::warn!("{failed} of {} samples failed and were dropped", results.len());
    }
    Ok(failed)
}

/// Componentwise mean and `std / sqrt(n)` in index order.
pub fn mean_and_stderr(values: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = values.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let dim = values[0].len();
    let mut mean = vec![0.0; dim];
    for v in values {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let stderr = if n < 2 {
        vec![0.0; dim]
    } else {
        (0..dim)
            .map(|c| {
                let var = values.iter().map(|v| (v[c] - mean[c]).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            })
            .collect()
    };
    (mean, stderr)
}

/// Model, ensemble, torus, mass and solver settings shared by all samples.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub model: OperatorModel<f64>,
    pub spec: FieldSpec,
    pub grid: TorusGrid,
    pub mass: Mass,
    pub opts: SolverOptions,
}

impl Ensemble {
    pub fn sample(&self, seed: u64) -> Result<ParameterField<f64>> {
        sample_parameter_field(&self.spec, &self.grid, seed)
    }

    fn rows_and_estimate(
        &self,
        xi: &[f64],
        direction: Option<&DirectionSet<f64>>,
        results: Vec<(u64, Result<(Vec<f64>, f64)>)>,
    ) -> Result<(HomogenizedEstimate, Vec<SampleRow>)> {
        let failed = check_failures(&results)?;
        let mut rows = Vec::with_capacity(results.len());
        let mut values = Vec::new();
        for (index, (seed, r)) in results.into_iter().enumerate() {
            match r {
                Ok((value, residual)) => {
                    values.push(value.clone());
                    rows.push(SampleRow { index, seed, value, residual, error: None });
                }
                Err(e) => rows.push(SampleRow { index, seed, value: Vec::new(), residual: f64::NAN, error: Some(e.to_string()) }),
            }
        }
        let (value, stderr) = mean_and_stderr(&values);
        let est = HomogenizedEstimate {
            xi: xi.to_vec(),
            direction: direction.map(|d| d.to_f64()),
            value,
            stderr,
            samples: values.len(),
            failed,
            mass: self.mass,
            seeds: rows.iter().map(|r| r.seed).collect(),
        };
        Ok((est, rows))
    }

    /// Sample mean of the spatially averaged flux `A(omega, xi + grad phi)`.
    pub fn estimate_a_hom(&self, xi: &[f64], samples: usize, master_seed: u64) -> Result<(HomogenizedEstimate, Vec<SampleRow>)> {
        let sp = Spectral::new(self.grid);
        let results = map_samples(samples, master_seed, |_, seed| {
            let omega = self.sample(seed)?;
            let st = solve_nonlinear(&sp, &omega, &self.model, xi, self.mass, &self.opts)?;
            Ok((st.flux.mean(), st.residual))
        });
        self.rows_and_estimate(xi, None, results)
    }

    /// Solves the family of `omega` up to the full direction set.
    pub fn family(&self, sp: &Spectral<f64>, omega: &ParameterField<f64>, xi: &[f64], dirs: &DirectionSet<f64>) -> Result<CorrectorFamily<f64>> {
        if self.model.max_order < dirs.len() + 1 {
            return Err(Error::OrderUnavailable(dirs.len() + 1));
        }
        let base = solve_nonlinear(sp, omega, &self.model, xi, self.mass, &self.opts)?;
        let law = HeterogeneousLaw::new(&self.model, omega)?;
        let mut fam = CorrectorFamily::new(base, dirs.clone())?;
        fam.solve_all(sp, &law, &self.opts)?;
        Ok(fam)
    }

    /// Sample mean of the spatially averaged linearized flux of the full set.
    pub fn estimate_derivative(
        &self,
        xi: &[f64],
        dirs: &DirectionSet<f64>,
        samples: usize,
        master_seed: u64,
    ) -> Result<(HomogenizedEstimate, Vec<SampleRow>)> {
        let sp = Spectral::new(self.grid);
        let results = map_samples(samples, master_seed, |_, seed| {
            let omega = self.sample(seed)?;
            let fam = self.family(&sp, &omega, xi, dirs)?;
            let full = dirs.full_set();
            let residual = fam.get(full).map(|e| e.residual).unwrap_or(0.0).max(fam.base.residual);
            Ok((fam.flux(full)?.mean(), residual))
        });
        self.rows_and_estimate(xi, Some(dirs), results)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_a_hom(
    model: &OperatorModel<f64>,
    spec: &FieldSpec,
    grid: &TorusGrid,
    xi: &[f64],
    mass: Mass,
    samples: usize,
    master_seed: u64,
    opts: &SolverOptions,
) -> Result<(HomogenizedEstimate, Vec<SampleRow>)> {
    let ens = Ensemble { model: *model, spec: spec.clone(), grid: *grid, mass, opts: *opts };
    ens.estimate_a_hom(xi, samples, master_seed)
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_derivative(
    model: &OperatorModel<f64>,
    spec: &FieldSpec,
    grid: &TorusGrid,
    xi: &[f64],
    mass: Mass,
    dirs: &DirectionSet<f64>,
    samples: usize,
    master_seed: u64,
    opts: &SolverOptions,
) -> Result<(HomogenizedEstimate, Vec<SampleRow>)> {
    let ens = Ensemble { model: *model, spec: spec.clone(), grid: *grid, mass, opts: *opts };
    ens.estimate_derivative(xi, dirs, samples, master_seed)
}

/// Norms of a Taylor remainder of correctors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorRemainder {
    pub order: usize,
    pub step: f64,
    pub phi_l2: f64,
    pub grad_phi_l2: f64,
    pub sigma_l2: Option<f64>,
}

/// Subset of a family with direction set `B, e, ..., e` (`b_len` leading
/// entries) selecting `B` together with the first `k` copies of `e`.
pub fn taylor_subset(b_len: usize, k: usize) -> Subset {
    ((1 << b_len) - 1) | (((1 << k) - 1) << b_len)
}

/// `target - sum_{k <= order} h^k / k! phi_{xi0, B e^k}` for a family at `xi0`
/// whose directions are `B` followed by at least `order` copies of the unit
/// vector `e = (xi - xi0) / h`. When `target_flux` is given the same
/// combination of fluxes is fed to the `sigma` solve.
pub fn taylor_remainder(
    spectral: &Spectral<f64>,
    family_at_xi0: &CorrectorFamily<f64>,
    b_len: usize,
    order: usize,
    h: f64,
    target_phi: &GridField<f64>,
    target_flux: Option<&GridField<f64>>,
) -> Result<TaylorRemainder> {
    let mut rem = target_phi.clone();
    let mut flux_rem = target_flux.cloned();
    let mut coef = 1.0;
    for k in 0..=order {
        if k > 0 {
            coef *= h / k as f64;
        }
        let s = taylor_subset(b_len, k);
        rem.axpy(-coef, family_at_xi0.phi(s)?)?;
        if let Some(q) = flux_rem.as_mut() {
            q.axpy(-coef, family_at_xi0.flux(s)?)?;
        }
    }
    let sigma_l2 = match flux_rem {
        Some(q) => Some(solve_sigma(spectral, &q, family_at_xi0.mass())?.l2_norm()),
        None => None,
    };
    Ok(TaylorRemainder {
        order,
        step: h,
        phi_l2: rem.l2_norm(),
        grad_phi_l2: spectral.gradient(&rem)?.l2_norm(),
        sigma_l2,
    })
}

/// Quenched Taylor study on one realization: for every step `h` solve the
/// corrector at `xi0 + h e` and compare with the expansion at `xi0`.
pub fn quenched_taylor_study(
    ens: &Ensemble,
    omega: &ParameterField<f64>,
    xi0: &[f64],
    e: &[f64],
    order: usize,
    steps: &[f64],
) -> Result<Vec<TaylorRemainder>> {
    let sp = Spectral::new(ens.grid);
    let dirs = DirectionSet::normalized(vec![e.to_vec(); order.max(1)])?;
    let fam0 = ens.family(&sp, omega, xi0, &dirs)?;
    steps
        .iter()
        .map(|&h| {
            let xi: Vec<f64> = xi0.iter().zip(dirs.vector(0)).map(|(a, b)| a + h * b).collect();
            let st = solve_nonlinear(&sp, omega, &ens.model, &xi, ens.mass, &ens.opts)?;
            taylor_remainder(&sp, &fam0, 0, order, h, &st.phi, Some(&st.flux))
        })
        .collect()
}

/// Writes `samples.csv` (index, seed, value_1..value_d, residual, status) and
/// `summary.json` with the estimate and the given configuration echo.
pub fn write_estimate(dir: impl AsRef<Path>, est: &HomogenizedEstimate, rows: &[SampleRow], config: &serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let d = est.xi.len();
    let mut csv = fs::File::create(dir.join("samples.csv"))?;
    let header: Vec<String> = ["index", "seed"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=d).map(|i| format!("value_{i}")))
        .chain(["residual".to_string(), "status".to_string()])
        .collect();
    writeln!(csv, "{}", header.join(","))?;
    for r in rows {
        let vals: Vec<String> = if r.value.is_empty() { vec![String::new(); d] } else { r.value.iter().map(|v| format!("{v:e}")).collect() };
        let status = if r.error.is_some() { "failed" } else { "ok" };
        writeln!(csv, "{},{},{},{:e},{}", r.index, r.seed, vals.join(","), r.residual, status)?;
    }
    let summary = serde_json::json!({
        "schema": 1,
        "estimate": est,
        "config": config,
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Rank;

    fn spec() -> FieldSpec {
        FieldSpec { n_components: 2, alpha: 1.0, amplitude: 2.0, corr_length: 1.0, offset: None }
    }

    fn ens(linear: bool, mass: Mass) -> Ensemble {
        let model = if linear {
            OperatorModel::linear(2, 2, 1.0, 3.0).unwrap()
        } else {
            OperatorModel::sine_perturbed(2, 2, 1.0, 3.0).unwrap()
        };
        Ensemble { model, spec: spec(), grid: TorusGrid::new(2, 16, 8.0).unwrap(), mass, opts: SolverOptions::default() }
    }

    #[test]
    fn degenerate_ensemble_gives_exact_value() {
        let mut e = ens(false, Mass::finite(4.0));
        e.spec = FieldSpec { amplitude: 0.0, offset: Some(vec![0.3, -0.2]), ..spec() };
        let (est, rows) = e.estimate_a_hom(&[1.0, 0.5], 4, 9).unwrap();
        let mut omega = [0.0; 2];
        crate::field::beta(&[0.3, -0.2], &mut omega);
        let mut expect = [0.0; 2];
        e.model.apply(&omega, &[1.0, 0.5], &mut expect);
        for i in 0..2 {
            assert!((est.value[i] - expect[i]).abs() < 1e-13);
            assert!(est.stderr[i] < 1e-13);
        }
        assert_eq!(rows.len(), 4);
    }

    #[test]
    fn harmonic_mean_per_sample_in_one_dimension() {
        // each sample is a shifted layered medium
        let grid = TorusGrid::new(1, 64, 1.0).unwrap();
        let model = OperatorModel::linear(1, 1, 1.0, 4.0).unwrap();
        let sp = Spectral::new(grid);
        let results = map_samples(4, 3, |i, _| {
            let vals = (0..64).map(|j| if (j + 5 * i) % 64 < 32 { -1.0 } else { 1.0 }).collect::<Vec<f64>>();
            let omega = ParameterField::new(GridField::from_values(grid, Rank::Channels(1), vals)?, 0)?;
            let st = solve_nonlinear(&sp, &omega, &model, &[2.0], Mass::INFINITE, &SolverOptions::default())?;
            Ok(st.flux.mean()[0])
        });
        for (_, r) in results {
            let v: f64 = r.unwrap();
            assert!((v - 3.2).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_model_derivatives() {
        let e = ens(true, Mass::finite(4.0));
        let dirs = DirectionSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (est, _) = e.estimate_derivative(&[1.0, 0.5], &dirs, 3, 1).unwrap();
        assert!(est.value.iter().chain(&est.stderr).all(|v| v.abs() <= 1e-12));

        // first derivative of a linear map is the map itself
        let dirs1 = DirectionSet::new(vec![vec![0.0, 1.0]]).unwrap();
        let (d1, _) = e.estimate_derivative(&[1.0, 0.5], &dirs1, 3, 1).unwrap();
        let (a, _) = e.estimate_a_hom(&[0.0, 1.0], 3, 1).unwrap();
        for i in 0..2 {
            assert!((d1.value[i] - a.value[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_model_estimates_are_additive() {
        let e = ens(true, Mass::finite(4.0));
        let (a, _) = e.estimate_a_hom(&[1.0, 0.0], 3, 5).unwrap();
        let (b, _) = e.estimate_a_hom(&[0.0, 2.0], 3, 5).unwrap();
        let (c, _) = e.estimate_a_hom(&[1.0, 2.0], 3, 5).unwrap();
        for i in 0..2 {
            assert!((a.value[i] + b.value[i] - c.value[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn quenched_monotonicity() {
        let e = ens(false, Mass::finite(4.0));
        let lam = e.model.effective_lambda();
        let pairs = [([1.0, 0.0], [0.0, 1.0]), ([2.0, -1.0], [1.5, 0.3]), ([0.1, 0.1], [-0.4, 0.9])];
        for (x1, x2) in pairs {
            let (a1, _) = e.estimate_a_hom(&x1, 1, 17).unwrap();
            let (a2, _) = e.estimate_a_hom(&x2, 1, 17).unwrap();
            let dot: f64 = (0..2usize).map(|i| (a1.value[i] - a2.value[i]) * (x1[i] - x2[i])).sum();
            let dist2: f64 = (0..2).map(|i| (x1[i] - x2[i]).powi(2)).sum();
            assert!(dot >= lam * dist2, "{dot} vs {}", lam * dist2);
        }
    }

    #[test]
    fn first_derivative_matches_quenched_difference() {
        let e = ens(false, Mass::finite(4.0));
        let xi = [1.0, 0.5];
        let dirs = DirectionSet::new(vec![vec![1.0, 0.0]]).unwrap();
        let (d, _) = e.estimate_derivative(&xi, &dirs, 1, 2).unwrap();
        let (a0, _) = e.estimate_a_hom(&xi, 1, 2).unwrap();
        let hs = [0.1, 0.05, 0.025];
        let errs: Vec<f64> = hs
            .iter()
            .map(|&h| {
                let (a, _) = e.estimate_a_hom(&[xi[0] + h, xi[1]], 1, 2).unwrap();
                (0..2).map(|i| ((a.value[i] - a0.value[i]) / h - d.value[i]).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let fit = crate::experiments::fit_loglog(&hs, &errs).unwrap();
        assert!(fit.slope >= 0.9, "{fit:?}");
    }

    #[test]
    fn taylor_remainders() {
        let e = ens(false, Mass::finite(4.0));
        let omega = e.sample(3).unwrap();
        let zero = quenched_taylor_study(&e, &omega, &[1.0, 0.5], &[0.6, 0.8], 1, &[0.0]).unwrap();
        assert_eq!(zero[0].phi_l2, 0.0);
        let hs = [0.2, 0.1, 0.05];
        for k in [0, 1] {
            let rems = quenched_taylor_study(&e, &omega, &[1.0, 0.5], &[0.6, 0.8], k, &hs).unwrap();
            let ys: Vec<f64> = rems.iter().map(|r| r.grad_phi_l2).collect();
            let fit = crate::experiments::fit_loglog(&hs, &ys).unwrap();
            assert!(fit.slope >= k as f64 + 0.8, "K = {k}: {fit:?}");
        }
        let lin = ens(true, Mass::finite(4.0));
        let omega = lin.sample(3).unwrap();
        let rems = quenched_taylor_study(&lin, &omega, &[1.0, 0.5], &[0.6, 0.8], 1, &hs).unwrap();
        assert!(rems.iter().all(|r| r.grad_phi_l2 <= 1e-9));
    }

    #[test]
    fn stderr_shrinks_with_more_samples() {
        let e = ens(false, Mass::finite(4.0));
        let (small, _) = e.estimate_a_hom(&[1.0, 0.0], 32, 8).unwrap();
        let (large, _) = e.estimate_a_hom(&[1.0, 0.0], 64, 8).unwrap();
        let ratio = large.stderr[0] / small.stderr[0];
        assert!((ratio * 2f64.sqrt() - 1.0).abs() <= 0.2, "{ratio}");
    }

    #[test]
    fn partial_failure_rule() {
        let ok: Vec<(u64, Result<f64>)> = (0..20).map(|i| (i, if i < 2 { Err(Error::OrderUnavailable(1)) } else { Ok(1.0) })).collect();
        assert_eq!(check_failures(&ok).unwrap(), 2);
        let bad: Vec<(u64, Result<f64>)> = (0..20).map(|i| (i, if i < 3 { Err(Error::OrderUnavailable(1)) } else { Ok(1.0) })).collect();
        assert!(matches!(check_failures(&bad), Err(Error::TooManyFailures { failed: 3, total: 20, .. })));
    }

    #[test]
    fn estimates_independent_of_worker_count() {
        let e = ens(false, Mass::finite(4.0));
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| e.estimate_a_hom(&[1.0, 0.5], 6, 4).unwrap())
        };
        let (a, ra) = run(1);
        let (b, rb) = run(3);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn estimate_files() {
        let e = ens(true, Mass::finite(4.0));
        let (est, rows) = e.estimate_a_hom(&[1.0, 0.5], 2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_estimate(dir.path(), &est, &rows, &serde_json::json!({"k": 1})).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
        assert!(csv.starts_with("index,seed,value_1,value_2,residual,status\n"));
        assert_eq!(csv.lines().count(), 3);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        let back: HomogenizedEstimate = serde_json::from_value(v["estimate"].clone()).unwrap();
        assert_eq!(back, est);
    }
}
