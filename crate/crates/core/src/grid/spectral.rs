//! Fourier pseudospectral calculus on the torus.
//!
//! All derivative operators share one multiplier convention: mode `j` along an
//! axis carries the wavenumber `2 pi j' / L` where `j'` is the signed index and
//! the Nyquist index is mapped to zero. Gradient, divergence, Laplacian and the
//! massive Helmholtz inverse are therefore simultaneously diagonal and commute
//! exactly in Fourier space.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{GridField, Mass, Rank, TorusGrid};
use crate::error::{Error, Result};
use crate::scalar::Real;

type C<S> = Complex<S>;

/// FFT plans and wavenumber tables for one grid.
#[derive(Clone)]
pub struct Spectral<S: Real> {
    grid: TorusGrid,
    forward: Arc<dyn Fft<S>>,
    backward: Arc<dyn Fft<S>>,
    /// Odd-derivative wavenumbers per axis index (Nyquist mapped to zero).
    k: Vec<S>,
    /// Linear index of the mode `-k` for every mode `k`.
    neg: Vec<usize>,
    /// Mask of modes removed by the 2/3 rule (all false unless dealiasing is on).
    filtered: Option<Vec<bool>>,
}

impl<S: Real> std::fmt::Debug for Spectral<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral")
            .field("grid", &self.grid)
            .field("dealias", &self.filtered.is_some())
            .finish()
    }
}

fn signed_index(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

impl<S: Real> Spectral<S> {
    pub fn new(grid: TorusGrid) -> Self {
        let n = grid.n_points;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let backward = planner.plan_fft_inverse(n);
        let two_pi_over_l = 2.0 * std::f64::consts::PI / grid.box_side;
        let k = (0..n)
            .map(|j| {
                if j == n / 2 {
                    S::zero()
                } else {
                    S::of(two_pi_over_l * signed_index(j, n) as f64)
                }
            })
            .collect();
        let neg = (0..grid.nodes())
            .map(|m| {
                let idx = grid.multi_index(m);
                let mut nidx = [0usize; 3];
                for a in 0..grid.d {
                    nidx[a] = (n - idx[a]) % n;
                }
                grid.linear_index(&nidx[..grid.d])
            })
            .collect();
        Self { grid, forward, backward, k, neg, filtered: None }
    }

    /// Enables the 2/3-rule filter on derivative outputs.
    pub fn with_dealiasing(mut self) -> Self {
        let n = self.grid.n_points as i64;
        let mask = (0..self.grid.nodes())
            .map(|m| {
                let idx = self.grid.multi_index(m);
                (0..self.grid.d).any(|a| 3 * signed_index(idx[a], n as usize).abs() > n)
            })
            .collect();
        self.filtered = Some(mask);
        self
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    #[inline]
    fn wavenumber(&self, mode: usize, axis: usize) -> S {
        let n = self.grid.n_points;
        let stride = n.pow((self.grid.d - 1 - axis) as u32);
        self.k[(mode / stride) % n]
    }

    /// `|k'|^2` of a mode.
    #[inline]
    pub fn k_squared(&self, mode: usize) -> S {
        (0..self.grid.d)
            .map(|a| {
                let k = self.wavenumber(mode, a);
                k * k
            })
            .sum()
    }

    /// Modes annihilated by every derivative: the zero mode and modes whose
    /// per-axis indices are all either zero or Nyquist.
    #[inline]
    pub fn is_null_mode(&self, mode: usize) -> bool {
        (0..self.grid.d).all(|a| self.wavenumber(mode, a) == S::zero())
    }

    fn transform_axis(&self, buf: &mut [C<S>], axis: usize, inverse: bool) {
        let n = self.grid.n_points;
        let d = self.grid.d;
        let plan = if inverse { &self.backward } else { &self.forward };
        let inner = n.pow((d - 1 - axis) as u32);
        let outer = buf.len() / (n * inner);
        if inner == 1 {
            plan.process(buf);
            return;
        }
        let mut tmp = vec![C::new(S::zero(), S::zero()); buf.len()];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    tmp[(o * inner + i) * n + j] = buf[base + i];
                }
            }
        }
        plan.process(&mut tmp);
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    buf[base + i] = tmp[(o * inner + i) * n + j];
                }
            }
        }
    }

    /// Unnormalized multi-dimensional DFT in place.
    pub fn fft(&self, buf: &mut [C<S>]) {
        for axis in 0..self.grid.d {
            self.transform_axis(buf, axis, false);
        }
    }

    /// Normalized inverse DFT in place.
    pub fn ifft(&self, buf: &mut [C<S>]) {
        for axis in 0..self.grid.d {
            self.transform_axis(buf, axis, true);
        }
        let scale = S::one() / S::of_usize(self.grid.nodes());
        buf.iter_mut().for_each(|z| *z = *z * scale);
    }

    pub fn forward_real(&self, x: &[S]) -> Vec<C<S>> {
        let mut buf: Vec<C<S>> = x.iter().map(|&v| C::new(v, S::zero())).collect();
        self.fft(&mut buf);
        buf
    }

    /// Spectra of two real signals from a single complex transform.
    pub fn forward_real_pair(&self, x: &[S], y: &[S]) -> (Vec<C<S>>, Vec<C<S>>) {
        let mut z: Vec<C<S>> = x.iter().zip(y).map(|(&a, &b)| C::new(a, b)).collect();
        self.fft(&mut z);
        let half = S::of(0.5);
        let mut xs = Vec::with_capacity(z.len());
        let mut ys = Vec::with_capacity(z.len());
        for (m, &zm) in z.iter().enumerate() {
            let zc = z[self.neg[m]].conj();
            xs.push((zm + zc) * half);
            // (z - conj z_-) / (2i)
            let t = (zm - zc) * half;
            ys.push(C::new(t.im, -t.re));
        }
        (xs, ys)
    }

    /// Real part of the inverse transform; the spectrum must be Hermitian.
    pub fn inverse_real(&self, mut spec: Vec<C<S>>) -> Vec<S> {
        self.ifft(&mut spec);
        spec.into_iter().map(|z| z.re).collect()
    }

    /// Two real signals from Hermitian spectra through one complex transform.
    pub fn inverse_real_pair(&self, a: &[C<S>], b: &[C<S>]) -> (Vec<S>, Vec<S>) {
        let mut z: Vec<C<S>> = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| C::new(x.re - y.im, x.im + y.re))
            .collect();
        self.ifft(&mut z);
        z.into_iter().map(|c| (c.re, c.im)).unzip()
    }

    #[inline]
    fn keep(&self, mode: usize) -> bool {
        self.filtered.as_ref().map_or(true, |f| !f[mode])
    }

    fn spectral_gradient(&self, fhat: &[C<S>], axis: usize) -> Vec<C<S>> {
        fhat.iter()
            .enumerate()
            .map(|(m, &z)| {
                if !self.keep(m) {
                    return C::new(S::zero(), S::zero());
                }
                let k = self.wavenumber(m, axis);
                C::new(-k * z.im, k * z.re)
            })
            .collect()
    }

    fn inverse_many(&self, spectra: Vec<Vec<C<S>>>) -> Vec<Vec<S>> {
        let mut out = Vec::with_capacity(spectra.len());
        let mut it = spectra.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => {
                    let (x, y) = self.inverse_real_pair(&a, &b);
                    out.push(x);
                    out.push(y);
                }
                None => out.push(self.inverse_real(a)),
            }
        }
        out
    }

    fn forward_many(&self, comps: &[&[S]]) -> Vec<Vec<C<S>>> {
        let mut out = Vec::with_capacity(comps.len());
        for chunk in comps.chunks(2) {
            if chunk.len() == 2 {
                let (a, b) = self.forward_real_pair(chunk[0], chunk[1]);
                out.push(a);
                out.push(b);
            } else {
                out.push(self.forward_real(chunk[0]));
            }
        }
        out
    }

    /// Gradient of the raw node values of a scalar signal.
    pub fn gradient_values(&self, f: &[S]) -> Vec<Vec<S>> {
        let fhat = self.forward_real(f);
        let spectra = (0..self.grid.d).map(|a| self.spectral_gradient(&fhat, a)).collect();
        self.inverse_many(spectra)
    }

    /// Divergence of `d` raw component signals.
    pub fn divergence_values(&self, comps: &[&[S]]) -> Vec<S> {
        let spectra = self.forward_many(comps);
        let mut acc = vec![C::new(S::zero(), S::zero()); self.grid.nodes()];
        for (axis, vhat) in spectra.iter().enumerate() {
            for (m, (o, &z)) in acc.iter_mut().zip(vhat).enumerate() {
                if self.keep(m) {
                    let k = self.wavenumber(m, axis);
                    *o = *o + C::new(-k * z.im, k * z.re);
                }
            }
        }
        self.inverse_real(acc)
    }

    /// Spectral gradient of a scalar field.
    pub fn gradient(&self, f: &GridField<S>) -> Result<GridField<S>> {
        self.check(f, Some(Rank::Scalar))?;
        let comps = self.gradient_values(f.values());
        GridField::from_values(self.grid, Rank::Vector, comps.concat())
    }

    /// Partial derivative along one axis of every component of a field.
    pub fn derivative(&self, f: &GridField<S>, axis: usize) -> Result<GridField<S>> {
        self.check(f, None)?;
        let mut values = Vec::with_capacity(f.values().len());
        for c in 0..f.n_components() {
            let fhat = self.forward_real(f.component(c));
            values.extend(self.inverse_real(self.spectral_gradient(&fhat, axis)));
        }
        GridField::from_values(self.grid, f.rank(), values)
    }

    /// Spectral divergence of a vector field.
    pub fn divergence(&self, v: &GridField<S>) -> Result<GridField<S>> {
        self.check(v, Some(Rank::Vector))?;
        let comps: Vec<&[S]> = (0..self.grid.d).map(|c| v.component(c)).collect();
        GridField::from_values(self.grid, Rank::Scalar, self.divergence_values(&comps))
    }

    /// Divergence of a matrix field acting on the first index:
    /// `(div sigma)_k = sum_l d_l sigma_{lk}`.
    pub fn matrix_divergence(&self, sigma: &GridField<S>) -> Result<GridField<S>> {
        self.check(sigma, Some(Rank::Matrix))?;
        let d = self.grid.d;
        let mut values = Vec::with_capacity(d * self.grid.nodes());
        for k in 0..d {
            let comps: Vec<&[S]> = (0..d).map(|l| sigma.component(l * d + k)).collect();
            values.extend(self.divergence_values(&comps));
        }
        GridField::from_values(self.grid, Rank::Vector, values)
    }

    /// Applies the multiplier `-|k'|^2` to every component.
    pub fn laplacian(&self, f: &GridField<S>) -> Result<GridField<S>> {
        self.map_multiplier(f, |m| {
            if self.keep(m) {
                -self.k_squared(m)
            } else {
                S::zero()
            }
        })
    }

    fn map_multiplier(&self, f: &GridField<S>, mult: impl Fn(usize) -> S) -> Result<GridField<S>> {
        self.check(f, None)?;
        let mut values = Vec::with_capacity(f.values().len());
        for c in 0..f.n_components() {
            let mut fhat = self.forward_real(f.component(c));
            fhat.iter_mut().enumerate().for_each(|(m, z)| *z = *z * mult(m));
            values.extend(self.inverse_real(fhat));
        }
        GridField::from_values(self.grid, f.rank(), values)
    }

    /// Removes the null-mode content (mean and all-Nyquist modes) of each component.
    pub fn project_null_modes(&self, f: &GridField<S>) -> Result<GridField<S>> {
        self.map_multiplier(f, |m| if self.is_null_mode(m) { S::zero() } else { S::one() })
    }

    /// Solves `(1/T - Laplacian) u = rhs` component-wise by Fourier division.
    ///
    /// For `T = inf` the right-hand side must be mean-free; the zero mode (and
    /// the all-Nyquist modes, which the discrete Laplacian annihilates) of the
    /// solution are set to zero.
    pub fn helmholtz_solve(&self, mass: Mass, rhs: &GridField<S>) -> Result<GridField<S>> {
        self.check(rhs, None)?;
        if mass.is_infinite() {
            let means = rhs.mean();
            let rms = (rhs.values().iter().map(|&v| v * v).sum::<S>()
                / S::of_usize(rhs.values().len()))
            .sqrt();
            for m in means {
                let rel = if rms > S::zero() { (m.abs() / rms).to_f64_lossy() } else { 0.0 };
                if rel > 1e-10 {
                    return Err(Error::MeanNotZero { mean: m.to_f64_lossy(), relative: rel });
                }
            }
        }
        let inv_t = S::of(mass.inverse());
        self.map_multiplier(rhs, |m| {
            let denom = inv_t + self.k_squared(m);
            if denom == S::zero() {
                S::zero()
            } else {
                S::one() / denom
            }
        })
    }

    /// Multiplies each mode by `1/(1/T + c |k'|^2)`, null modes dropped when `T = inf`.
    pub(crate) fn precondition(&self, r: &[S], inv_t: S, c: S) -> Vec<S> {
        let mut rhat = self.forward_real(r);
        for (m, z) in rhat.iter_mut().enumerate() {
            let denom = inv_t + c * self.k_squared(m);
            *z = if denom == S::zero() { C::new(S::zero(), S::zero()) } else { *z / denom };
        }
        self.inverse_real(rhat)
    }

    /// Ball averages `x -> mean_{B_r(x)} f` at every node, by FFT convolution
    /// with the node indicator of `{|y| < r}`.
    pub fn ball_average_field(&self, f: &GridField<S>, radius: f64) -> Result<GridField<S>> {
        self.check(f, None)?;
        let origin = [0.0; 3];
        let mask: Vec<S> = (0..self.grid.nodes())
            .map(|m| {
                let x = self.grid.coords(m);
                if self.grid.periodic_distance(&x, &origin) < radius {
                    S::one()
                } else {
                    S::zero()
                }
            })
            .collect();
        let count: S = mask.iter().copied().sum();
        if count == S::zero() {
            return Err(Error::EmptyBall { radius });
        }
        let khat = self.forward_real(&mask);
        let mut values = Vec::with_capacity(f.values().len());
        for c in 0..f.n_components() {
            let mut fhat = self.forward_real(f.component(c));
            // the kernel is even, so convolution and correlation coincide
            for (z, &kz) in fhat.iter_mut().zip(&khat) {
                *z = *z * kz / count;
            }
            values.extend(self.inverse_real(fhat));
        }
        GridField::from_values(self.grid, f.rank(), values)
    }

    fn check(&self, f: &GridField<S>, rank: Option<Rank>) -> Result<()> {
        if *f.grid() != self.grid {
            return Err(Error::ShapeMismatch("field lives on a different grid".into()));
        }
        if let Some(r) = rank {
            if f.rank() != r {
                return Err(Error::ShapeMismatch(format!("expected {r:?}, got {:?}", f.rank())));
            }
        }
        Ok(())
    }
}

/// Mean of `f` over grid nodes at periodic distance strictly below `radius`
/// from `center`, per component.
pub fn ball_average<S: Real>(f: &GridField<S>, center: &[f64], radius: f64) -> Result<Vec<S>> {
    let grid = f.grid();
    let mut sums = vec![S::zero(); f.n_components()];
    let mut count = 0usize;
    for node in 0..grid.nodes() {
        let x = grid.coords(node);
        if grid.periodic_distance(&x, center) < radius {
            count += 1;
            for (c, s) in sums.iter_mut().enumerate() {
                *s = *s + f.at(c, node);
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyBall { radius });
    }
    let n = S::of_usize(count);
    Ok(sums.into_iter().map(|s| s / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(d: usize, n: usize, l: f64) -> TorusGrid {
        TorusGrid::new(d, n, l).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn gradient_of_sine_mode_is_exact() {
        let l = 3.0;
        let g = grid(2, 16, l);
        let sp = Spectral::<f64>::new(g);
        let f = GridField::scalar_from_fn(g, |x| (2.0 * PI * x[0] / l).sin());
        let grad = sp.gradient(&f).unwrap();
        let expected: Vec<f64> = (0..g.nodes())
            .map(|m| 2.0 * PI / l * (2.0 * PI * g.coords(m)[0] / l).cos())
            .collect();
        assert!(max_diff(grad.component(0), &expected) < 1e-12);
        assert!(grad.component(1).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        let g = grid(3, 8, 1.0);
        let sp = Spectral::<f64>::new(g);
        let f = GridField::constant(g, Rank::Scalar, &[2.5]);
        assert!(sp.gradient(&f).unwrap().max_abs() < 1e-13);
        let v = GridField::constant(g, Rank::Vector, &[1.0, -2.0, 3.0]);
        assert!(sp.divergence(&v).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn divergence_of_gradient_is_laplacian() {
        let g = grid(2, 16, 2.0);
        let sp = Spectral::<f64>::new(g);
        let f = GridField::scalar_from_fn(g, |x| (x[0] * x[1]).sin() + x[0].cos() * 0.3);
        let lhs = sp.divergence(&sp.gradient(&f).unwrap()).unwrap();
        let rhs = sp.laplacian(&f).unwrap();
        assert!(max_diff(lhs.values(), rhs.values()) < 1e-12 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn divergence_of_sine_gradient() {
        let l = 5.0;
        let g = grid(1, 32, l);
        let sp = Spectral::<f64>::new(g);
        let f = GridField::scalar_from_fn(g, |x| (2.0 * PI * x[0] / l).sin());
        let lap = sp.divergence(&sp.gradient(&f).unwrap()).unwrap();
        let k2 = (2.0 * PI / l).powi(2);
        let expected: Vec<f64> = f.values().iter().map(|v| -k2 * v).collect();
        assert!(max_diff(lap.values(), &expected) < 1e-12);
    }

    #[test]
    fn divergence_of_curl_type_field_vanishes() {
        let g = grid(2, 16, 1.0);
        let sp = Spectral::<f64>::new(g);
        let h = GridField::scalar_from_fn(g, |x| {
            (2.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).cos() + (6.0 * PI * (x[0] + x[1])).sin()
        });
        let gh = sp.gradient(&h).unwrap();
        let mut v = GridField::zeros(g, Rank::Vector);
        v.component_mut(0).copy_from_slice(gh.component(1));
        for (o, &x) in v.component_mut(1).iter_mut().zip(gh.component(0)) {
            *o = -x;
        }
        assert!(sp.divergence(&v).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn helmholtz_single_modes() {
        let l = 2.0;
        let g = grid(1, 16, l);
        let sp = Spectral::<f64>::new(g);
        let k = 2.0 * PI / l;
        let rhs = GridField::scalar_from_fn(g, |x| (k * x[0]).cos());
        let u = sp.helmholtz_solve(Mass::finite(1.0), &rhs).unwrap();
        let exp: Vec<f64> = rhs.values().iter().map(|v| v / (1.0 + k * k)).collect();
        assert!(max_diff(u.values(), &exp) < 1e-13);
        let u = sp.helmholtz_solve(Mass::INFINITE, &rhs).unwrap();
        let exp: Vec<f64> = rhs.values().iter().map(|v| v / (k * k)).collect();
        assert!(max_diff(u.values(), &exp) < 1e-13);
        let zero = GridField::zeros(g, Rank::Scalar);
        assert_eq!(sp.helmholtz_solve(Mass::finite(3.0), &zero).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn helmholtz_rejects_mean_for_infinite_mass() {
        let g = grid(1, 8, 1.0);
        let sp = Spectral::<f64>::new(g);
        let rhs = GridField::scalar_from_fn(g, |x| 1.0 + x[0]);
        assert!(matches!(
            sp.helmholtz_solve(Mass::INFINITE, &rhs),
            Err(Error::MeanNotZero { .. })
        ));
    }

    #[test]
    fn ball_average_cases() {
        let g = grid(1, 16, 4.0);
        let c = GridField::<f64>::constant(g, Rank::Scalar, &[1.75]);
        assert!((ball_average(&c, &[1.0], 0.8).unwrap()[0] - 1.75).abs() < 1e-15);
        // odd symmetric profile around the origin
        let f = GridField::<f64>::scalar_from_fn(g, |x| if x[0] < 2.0 { x[0] } else { x[0] - 4.0 });
        assert!(ball_average(&f, &[0.0], 1.1).unwrap()[0].abs() < 1e-15);
        let all = ball_average(&f, &[0.0], 10.0).unwrap()[0];
        assert!((all - f.mean()[0]).abs() < 1e-15);
        assert!(matches!(ball_average(&f, &[0.1], 0.05), Err(Error::EmptyBall { .. })));
    }

    #[test]
    fn ball_average_field_matches_direct() {
        let g = grid(2, 16, 4.0);
        let sp = Spectral::<f64>::new(g);
        let f = GridField::scalar_from_fn(g, |x| (x[0] * 1.3).sin() + (x[1] * 0.7).cos() * x[0]);
        let r = 0.9;
        let conv = sp.ball_average_field(&f, r).unwrap();
        for node in [0, 17, 100, 255] {
            let direct = ball_average(&f, &g.coords(node)[..2], r).unwrap()[0];
            assert!((conv.values()[node] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn paired_transforms_match_single() {
        let g = grid(2, 8, 1.0);
        let sp = Spectral::<f64>::new(g);
        let a: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..64).map(|i| (i as f64 * 0.11).cos() * i as f64).collect();
        let (ah, bh) = sp.forward_real_pair(&a, &b);
        let (a2, b2) = (sp.forward_real(&a), sp.forward_real(&b));
        for m in 0..64 {
            assert!((ah[m] - a2[m]).norm() < 1e-11);
            assert!((bh[m] - b2[m]).norm() < 1e-11);
        }
        let (ar, br) = sp.inverse_real_pair(&a2, &b2);
        assert!(max_diff(&ar, &a) < 1e-13 && max_diff(&br, &b) < 1e-12);
    }

    #[test]
    fn dealiasing_filters_high_modes() {
        let g = grid(1, 12 + 4, 1.0);
        let sp = Spectral::<f64>::new(g).with_dealiasing();
        let hi = GridField::scalar_from_fn(g, |x| (2.0 * PI * 7.0 * x[0]).sin());
        assert!(sp.gradient(&hi).unwrap().max_abs() < 1e-12);
        let lo = GridField::scalar_from_fn(g, |x| (2.0 * PI * 2.0 * x[0]).sin());
        assert!(sp.gradient(&lo).unwrap().max_abs() > 1.0);
    }

    #[test]
    fn single_precision_gradient() {
        let l = 1.0;
        let g = grid(1, 32, l);
        let sp = Spectral::<f32>::new(g);
        let f = GridField::<f32>::scalar_from_fn(g, |x| (2.0 * PI * x[0]).sin());
        let grad = sp.gradient(&f).unwrap();
        for m in 0..32 {
            let exact = 2.0 * PI * (2.0 * PI * g.coords(m)[0]).cos();
            assert!((grad.values()[m] as f64 - exact).abs() < 1e-4);
        }
    }
}
