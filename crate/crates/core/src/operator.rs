//! Monotone constitutive laws `A(omega, xi)` with closed-form derivatives of
//! every order in `xi` and mixed first derivatives in `omega`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Maximal number of direction arguments a multilinear evaluation accepts.
pub const MAX_DIRS: usize = 8;
/// Maximal number of parameter channels.
pub const MAX_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `A = a(omega) xi` with `a = lambda + (Lambda - lambda)(1 + omega_1)/2`.
    Linear,
    /// `A_i = a(omega) xi_i + b(omega) sin(xi_i)` with `b = b_scale * omega_m`,
    /// `m = min(2, n)`.
    SinePerturbed,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::SinePerturbed => "sine_perturbed",
        }
    }
}

/// A built-in monotone operator family with its structural constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatorModel<S> {
    pub kind: ModelKind,
    pub d: usize,
    pub n: usize,
    pub lambda: S,
    pub cap_lambda: S,
    /// Amplitude of the sine perturbation; `lambda / 2` keeps the declared
    /// monotonicity constant.
    pub b_scale: S,
    pub max_order: usize,
}

impl<S: Real> OperatorModel<S> {
    pub fn new(kind: ModelKind, d: usize, n: usize, lambda: S, cap_lambda: S) -> Result<Self> {
        if !(lambda > S::zero() && cap_lambda >= lambda) {
            return Err(Error::InvalidParameter(format!("need 0 < lambda <= Lambda, got {lambda}, {cap_lambda}")));
        }
        if n == 0 || n > MAX_CHANNELS || !(1..=3).contains(&d) {
            return Err(Error::InvalidParameter(format!("bad dimensions d = {d}, n = {n}")));
        }
        let b_scale = match kind {
            ModelKind::Linear => S::zero(),
            ModelKind::SinePerturbed => lambda * S::of(0.5),
        };
        Ok(Self { kind, d, n, lambda, cap_lambda, b_scale, max_order: MAX_DIRS })
    }

    pub fn linear(d: usize, n: usize, lambda: S, cap_lambda: S) -> Result<Self> {
        Self::new(ModelKind::Linear, d, n, lambda, cap_lambda)
    }

    pub fn sine_perturbed(d: usize, n: usize, lambda: S, cap_lambda: S) -> Result<Self> {
        Self::new(ModelKind::SinePerturbed, d, n, lambda, cap_lambda)
    }

    /// Overrides the sine amplitude (values above `lambda / 2` break the
    /// declared monotonicity constant).
    pub fn with_b_scale(mut self, b_scale: S) -> Self {
        self.b_scale = b_scale;
        self
    }

    pub fn with_max_order(mut self, max_order: usize) -> Self {
        self.max_order = max_order.min(MAX_DIRS);
        self
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Declared lower bound for the symmetric part of `d_xi A`.
    pub fn effective_lambda(&self) -> S {
        match self.kind {
            ModelKind::Linear => self.lambda,
            ModelKind::SinePerturbed => self.lambda * S::of(0.5),
        }
    }

    /// Declared upper bound for `|d_xi A|`.
    pub fn effective_cap_lambda(&self) -> S {
        match self.kind {
            ModelKind::Linear => self.cap_lambda,
            ModelKind::SinePerturbed => self.cap_lambda + self.lambda * S::of(0.5),
        }
    }

    /// Declared Lipschitz constant of `omega -> A(omega, xi) / |xi|`.
    pub fn omega_lipschitz(&self) -> S {
        (self.cap_lambda - self.lambda) * S::of(0.5) + self.b_scale.abs()
    }

    #[inline]
    fn sine_channel(&self) -> usize {
        self.n.min(2) - 1
    }

    #[inline]
    fn a_coef(&self, omega: &[S]) -> S {
        self.lambda + (self.cap_lambda - self.lambda) * (S::one() + omega[0]) * S::of(0.5)
    }

    #[inline]
    fn a_variation(&self, delta: &[S]) -> S {
        (self.cap_lambda - self.lambda) * S::of(0.5) * delta[0]
    }

    #[inline]
    fn b_coef(&self, omega: &[S]) -> S {
        match self.kind {
            ModelKind::Linear => S::zero(),
            ModelKind::SinePerturbed => self.b_scale * omega[self.sine_channel()],
        }
    }

    #[inline]
    fn b_variation(&self, delta: &[S]) -> S {
        match self.kind {
            ModelKind::Linear => S::zero(),
            ModelKind::SinePerturbed => self.b_scale * delta[self.sine_channel()],
        }
    }

    /// `A(omega, xi)`.
    pub fn apply(&self, omega: &[S], xi: &[S], out: &mut [S]) {
        let a = self.a_coef(omega);
        let b = self.b_coef(omega);
        for i in 0..self.d {
            out[i] = a * xi[i] + b * xi[i].sin();
        }
    }

    /// The Jacobian `d_xi A(omega, xi)` as a row-major `d x d` matrix.
    pub fn jacobian(&self, omega: &[S], xi: &[S], out: &mut [S]) {
        let a = self.a_coef(omega);
        let b = self.b_coef(omega);
        let d = self.d;
        out[..d * d].iter_mut().for_each(|v| *v = S::zero());
        for i in 0..d {
            out[i * d + i] = a + b * xi[i].cos();
        }
    }

    /// The symmetric multilinear map `d_xi^k A(omega, xi)[w_1, ..., w_k]`, `k = dirs.len()`.
    pub fn d_xi(&self, omega: &[S], xi: &[S], dirs: &[&[S]], out: &mut [S]) -> Result<()> {
        let k = dirs.len();
        if k == 0 || k > self.max_order {
            return Err(Error::OrderUnavailable(k));
        }
        let a = self.a_coef(omega);
        let b = self.b_coef(omega);
        self.multilinear(a, b, xi, dirs, out);
        Ok(())
    }

    /// `d_omega d_xi^k A(omega, xi)[delta, w_1, ..., w_k]`, `k = dirs.len() >= 0`.
    pub fn d_omega_d_xi(&self, omega: &[S], xi: &[S], delta: &[S], dirs: &[&[S]], out: &mut [S]) -> Result<()> {
        let k = dirs.len();
        if k + 1 > self.max_order {
            return Err(Error::OrderUnavailable(k));
        }
        let _ = omega;
        let da = self.a_variation(delta);
        let db = self.b_variation(delta);
        if k == 0 {
            for i in 0..self.d {
                out[i] = da * xi[i] + db * xi[i].sin();
            }
        } else {
            self.multilinear(da, db, xi, dirs, out);
        }
        Ok(())
    }

    #[inline]
    fn multilinear(&self, a: S, b: S, xi: &[S], dirs: &[&[S]], out: &mut [S]) {
        let k = dirs.len();
        for i in 0..self.d {
            let prod = dirs.iter().fold(S::one(), |p, w| p * w[i]);
            let lin = if k == 1 { a * dirs[0][i] } else { S::zero() };
            out[i] = lin + b * sin_derivative(xi[i], k) * prod;
        }
    }
}

/// `k`-th derivative of `sin` at `x`.
#[inline]
pub fn sin_derivative<S: Real>(x: S, k: usize) -> S {
    match k % 4 {
        0 => x.sin(),
        1 => x.cos(),
        2 => -x.sin(),
        _ => -x.cos(),
    }
}

/// Worst observed ratios of a Monte-Carlo check of the structural assumptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub model: String,
    pub samples: usize,
    /// `max |A(omega, 0)|`.
    pub normalization_max: f64,
    /// `min (A(xi1) - A(xi2)).(xi1 - xi2) / |xi1 - xi2|^2`.
    pub monotonicity_min: f64,
    pub declared_lambda: f64,
    /// `max |d_xi A [w]| / |w|`.
    pub jacobian_max: f64,
    /// `min w . d_xi A [w] / |w|^2`.
    pub jacobian_coercivity_min: f64,
    pub declared_cap_lambda: f64,
    /// `max |A(omega1, xi) - A(omega2, xi)| / (|omega1 - omega2| |xi|)`.
    pub omega_lipschitz_max: f64,
    pub declared_omega_lipschitz: f64,
    pub monotone: bool,
    pub bounded: bool,
    pub omega_lipschitz: bool,
    pub passed: bool,
}

fn random_ball_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let r: f64 = rng.random::<f64>().powf(1.0 / n as f64);
    g.iter().map(|v| v / norm * r * (1.0 - 1e-12)).collect()
}

/// Samples random `(omega, xi1, xi2)` with `|xi_i|_inf <= xi_box` and records
/// the worst ratios against the model's declared constants.
pub fn validate_assumptions<S: Real>(model: &OperatorModel<S>, samples: usize, seed: u64, xi_box: f64) -> AssumptionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.d;
    let cast = |v: &[f64]| v.iter().map(|&x| S::of(x)).collect::<Vec<S>>();
    let mut rep = AssumptionReport {
        model: model.name().into(),
        samples,
        normalization_max: 0.0,
        monotonicity_min: f64::INFINITY,
        declared_lambda: model.effective_lambda().to_f64_lossy(),
        jacobian_max: 0.0,
        jacobian_coercivity_min: f64::INFINITY,
        declared_cap_lambda: model.effective_cap_lambda().to_f64_lossy(),
        omega_lipschitz_max: 0.0,
        declared_omega_lipschitz: model.omega_lipschitz().to_f64_lossy(),
        monotone: false,
        bounded: false,
        omega_lipschitz: false,
        passed: false,
    };
    let zero = vec![S::zero(); d];
    let (mut a1, mut a2) = (vec![S::zero(); d], vec![S::zero(); d]);
    let mut jac = vec![S::zero(); d * d];
    for _ in 0..samples {
        let omega = cast(&random_ball_point(&mut rng, model.n));
        let omega2 = cast(&random_ball_point(&mut rng, model.n));
        let mut box_point = || -> Vec<S> { (0..d).map(|_| S::of(xi_box * (2.0 * rng.random::<f64>() - 1.0))).collect() };
        let xi1 = box_point();
        let xi2 = box_point();
        let w = box_point();

        model.apply(&omega, &zero, &mut a1);
        rep.normalization_max = rep.normalization_max.max(norm64(&a1));

        model.apply(&omega, &xi1, &mut a1);
        model.apply(&omega, &xi2, &mut a2);
        let diff_xi: Vec<f64> = xi1.iter().zip(&xi2).map(|(x, y)| (*x - *y).to_f64_lossy()).collect();
        let dxi2: f64 = diff_xi.iter().map(|v| v * v).sum();
        if dxi2 > 0.0 {
            let pair: f64 = a1.iter().zip(&a2).zip(&diff_xi).map(|((p, q), r)| (*p - *q).to_f64_lossy() * r).sum();
            rep.monotonicity_min = rep.monotonicity_min.min(pair / dxi2);
        }

        model.jacobian(&omega, &xi1, &mut jac);
        let jw: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| (jac[i * d + j] * w[j]).to_f64_lossy()).sum())
            .collect();
        let wn2: f64 = w.iter().map(|v| v.to_f64_lossy().powi(2)).sum();
        if wn2 > 0.0 {
            rep.jacobian_max = rep.jacobian_max.max(norm64(&jw) / wn2.sqrt());
            let coerc: f64 = jw.iter().zip(&w).map(|(a, b)| a * b.to_f64_lossy()).sum();
            rep.jacobian_coercivity_min = rep.jacobian_coercivity_min.min(coerc / wn2);
        }

        model.apply(&omega2, &xi1, &mut a2);
        let domega: f64 = omega.iter().zip(&omega2).map(|(p, q)| (*p - *q).to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        let xin: f64 = xi1.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if domega > 0.0 && xin > 0.0 {
            let da: f64 = a1.iter().zip(&a2).map(|(p, q)| (*p - *q).to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            rep.omega_lipschitz_max = rep.omega_lipschitz_max.max(da / (domega * xin));
        }
    }
    let slack = 1e-9;
    rep.monotone = rep.normalization_max <= slack
        && rep.monotonicity_min >= rep.declared_lambda * (1.0 - slack)
        && rep.jacobian_coercivity_min >= rep.declared_lambda * (1.0 - slack);
    rep.bounded = rep.jacobian_max <= rep.declared_cap_lambda * (1.0 + slack);
    rep.omega_lipschitz = rep.omega_lipschitz_max <= rep.declared_omega_lipschitz * (1.0 + slack);
    rep.passed = rep.monotone && rep.bounded && rep.omega_lipschitz;
    rep
}

fn norm64<S: Real>(v: &[S]) -> f64 {
    v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn rng_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
    }

    fn sine() -> OperatorModel<f64> {
        OperatorModel::sine_perturbed(2, 2, 1.0, 3.0).unwrap()
    }

    #[test]
    fn zero_gradient_gives_zero_flux() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for model in [OperatorModel::linear(3, 2, 1.0, 2.0).unwrap(), OperatorModel::sine_perturbed(3, 2, 1.0, 2.0).unwrap()] {
            for _ in 0..50 {
                let omega = random_ball_point(&mut rng, 2);
                let mut out = [1.0; 3];
                model.apply(&omega, &[0.0; 3], &mut out);
                assert_eq!(out, [0.0; 3]);
            }
        }
    }

    #[test]
    fn closed_form_examples() {
        // a = 1 needs omega_1 = -1; b = 0.25 needs omega_2 = 0.5 with b_scale = 0.5
        let model = OperatorModel::sine_perturbed(2, 2, 1.0, 3.0).unwrap();
        let mut out = [0.0; 2];
        model.apply(&[-1.0, 0.5], &[FRAC_PI_2, 0.0], &mut out);
        assert!((out[0] - (FRAC_PI_2 + 0.25)).abs() < 1e-15);
        assert_eq!(out[1], 0.0);

        // a = 2 at omega_1 = 0 for lambda = 1, Lambda = 3
        let lin = OperatorModel::linear(2, 1, 1.0, 3.0).unwrap();
        lin.apply(&[0.0], &[1.0, -1.0], &mut out);
        assert_eq!(out, [2.0, -2.0]);
    }

    #[test]
    fn second_derivatives_of_special_cases_vanish() {
        let lin = OperatorModel::linear(2, 2, 1.0, 3.0).unwrap();
        let mut out = [1.0; 2];
        lin.d_xi(&[0.3, 0.1], &[0.4, -2.0], &[&[1.0, 2.0], &[0.5, -1.0]], &mut out).unwrap();
        assert_eq!(out, [0.0; 2]);
        sine().d_xi(&[0.3, 0.6], &[0.0, 0.0], &[&[1.0, 2.0], &[0.5, -1.0]], &mut out).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-16));
    }

    #[test]
    fn first_derivative_matches_central_difference() {
        let model = sine();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..100 {
            let omega = random_ball_point(&mut rng, 2);
            let xi = rng_vec(&mut rng, 2, 3.0);
            let w = rng_vec(&mut rng, 2, 1.0);
            let mut exact = [0.0; 2];
            model.d_xi(&omega, &xi, &[&w], &mut exact).unwrap();
            let (mut p, mut m) = ([0.0; 2], [0.0; 2]);
            let xp: Vec<f64> = xi.iter().zip(&w).map(|(x, v)| x + h * v).collect();
            let xm: Vec<f64> = xi.iter().zip(&w).map(|(x, v)| x - h * v).collect();
            model.apply(&omega, &xp, &mut p);
            model.apply(&omega, &xm, &mut m);
            for i in 0..2 {
                assert!(((p[i] - m[i]) / (2.0 * h) - exact[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn higher_orders_match_difference_of_lower_order() {
        let model = sine();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        for k in 2..=5 {
            for _ in 0..100 {
                let omega = random_ball_point(&mut rng, 2);
                let xi = rng_vec(&mut rng, 2, 3.0);
                let dirs: Vec<Vec<f64>> = (0..k).map(|_| rng_vec(&mut rng, 2, 1.0)).collect();
                let refs: Vec<&[f64]> = dirs.iter().map(|v| v.as_slice()).collect();
                let mut exact = [0.0; 2];
                model.d_xi(&omega, &xi, &refs, &mut exact).unwrap();
                let last = &dirs[k - 1];
                let xp: Vec<f64> = xi.iter().zip(last).map(|(x, v)| x + h * v).collect();
                let xm: Vec<f64> = xi.iter().zip(last).map(|(x, v)| x - h * v).collect();
                let (mut p, mut m) = ([0.0; 2], [0.0; 2]);
                model.d_xi(&omega, &xp, &refs[..k - 1], &mut p).unwrap();
                model.d_xi(&omega, &xm, &refs[..k - 1], &mut m).unwrap();
                for i in 0..2 {
                    assert!(((p[i] - m[i]) / (2.0 * h) - exact[i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn multilinear_maps_are_symmetric() {
        let model = sine();
        let dirs: [&[f64]; 3] = [&[0.3, -1.0], &[2.0, 0.7], &[-0.4, 0.9]];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut reference = [0.0; 2];
        model.d_xi(&[0.2, -0.5], &[0.8, 1.9], &dirs, &mut reference).unwrap();
        for p in perms {
            let permuted = [dirs[p[0]], dirs[p[1]], dirs[p[2]]];
            let mut out = [0.0; 2];
            model.d_xi(&[0.2, -0.5], &[0.8, 1.9], &permuted, &mut out).unwrap();
            for i in 0..2 {
                assert!((out[i] - reference[i]).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn order_limits() {
        let model = sine().with_max_order(3);
        let w: &[f64] = &[1.0, 0.0];
        let mut out = [0.0; 2];
        assert!(matches!(model.d_xi(&[0.0, 0.0], &[0.0, 0.0], &[w; 4], &mut out), Err(Error::OrderUnavailable(4))));
        assert!(model.d_xi(&[0.0, 0.0], &[0.0, 0.0], &[w; 3], &mut out).is_ok());
        assert!(model.d_omega_d_xi(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[w; 3], &mut out).is_err());
        assert!(model.d_xi(&[0.0, 0.0], &[0.0, 0.0], &[], &mut out).is_err());
    }

    #[test]
    fn mixed_derivative_linear_cases() {
        let lin = OperatorModel::linear(2, 2, 1.0, 3.0).unwrap();
        let mut out = [1.0f64; 2];
        lin.d_omega_d_xi(&[0.2, 0.0], &[0.0, 0.0], &[0.7, 0.3], &[], &mut out).unwrap();
        assert_eq!(out, [0.0; 2]);
        lin.d_omega_d_xi(&[0.2, 0.0], &[0.5, 0.1], &[0.7, 0.3], &[&[1.0, -2.0]], &mut out).unwrap();
        // (Lambda - lambda)/2 * delta_1 * dir
        assert!((out[0] - 0.7).abs() < 1e-15 && (out[1] + 1.4).abs() < 1e-15);
    }

    #[test]
    fn mixed_derivative_matches_omega_difference() {
        let model = sine();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for _ in 0..100 {
            let omega: Vec<f64> = random_ball_point(&mut rng, 2).iter().map(|v| v * 0.9).collect();
            let delta = rng_vec(&mut rng, 2, 1.0);
            let xi = rng_vec(&mut rng, 2, 3.0);
            let w = rng_vec(&mut rng, 2, 1.0);
            let mut exact = [0.0; 2];
            model.d_omega_d_xi(&omega, &xi, &delta, &[&w], &mut exact).unwrap();
            let op: Vec<f64> = omega.iter().zip(&delta).map(|(o, v)| o + h * v).collect();
            let om: Vec<f64> = omega.iter().zip(&delta).map(|(o, v)| o - h * v).collect();
            let (mut p, mut m) = ([0.0; 2], [0.0; 2]);
            model.d_xi(&op, &xi, &[&w], &mut p).unwrap();
            model.d_xi(&om, &xi, &[&w], &mut m).unwrap();
            for i in 0..2 {
                assert!(((p[i] - m[i]) / (2.0 * h) - exact[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn validation_of_built_ins() {
        let lin = OperatorModel::linear(2, 2, 1.0, 2.0).unwrap();
        let rep = validate_assumptions(&lin, 2000, 3, 4.0);
        assert!(rep.passed, "{rep:?}");
        assert!(rep.monotonicity_min >= 1.0 - 1e-12);

        let s = OperatorModel::sine_perturbed(2, 2, 1.0, 2.0).unwrap();
        let rep = validate_assumptions(&s, 2000, 3, 4.0);
        assert!(rep.passed, "{rep:?}");
        assert!(rep.monotonicity_min >= 0.5);
    }

    #[test]
    fn broken_model_is_flagged() {
        let broken = OperatorModel::sine_perturbed(1, 1, 1.0, 2.0).unwrap().with_b_scale(2.0);
        // omega = -0.9 gives a = 1.05, b = -1.8, so d_xi A = a + b cos(xi) < 0 near 0
        let mut p = [0.0];
        let mut q = [0.0];
        broken.apply(&[-0.9], &[-0.05], &mut p);
        broken.apply(&[-0.9], &[0.05], &mut q);
        assert!((q[0] - p[0]) / 0.1 < 0.0);
        let rep = validate_assumptions(&broken, 2000, 5, 4.0);
        assert!(!rep.monotone && !rep.passed);
    }
}
