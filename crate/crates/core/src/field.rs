//! Stationary Gaussian parameter fields by spectral synthesis, and the
//! clipping map into the open unit ball.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridField, Rank, Spectral, TorusGrid};
use crate::scalar::Real;
use crate::seeds::mix64;

/// Spectral description of the Gaussian ensemble.
///
/// The covariance multiplier of mode `k` is
/// `amplitude * (1 + corr_length * |2 pi k / L|)^-(d + alpha)`. Synthesis is
/// normalized so that the node variance equals the sum of the multipliers over
/// nonzero modes divided by the node count; at a fixed physical correlation
/// structure `amplitude` therefore scales like the inverse cell volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub n_components: usize,
    pub alpha: f64,
    /// Zero gives the degenerate constant ensemble.
    pub amplitude: f64,
    pub corr_length: f64,
    /// Constant shift added to the raw Gaussian field before clipping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::InvalidParameter("n_components must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.corr_length > 0.0 && self.amplitude >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need alpha > 0, corr_length > 0, amplitude >= 0; got {self:?}"
            )));
        }
        if let Some(off) = &self.offset {
            if off.len() != self.n_components {
                return Err(Error::InvalidParameter("offset length must equal n_components".into()));
            }
        }
        Ok(())
    }

    /// Covariance multiplier `c_hat(k)` at physical wavenumber magnitude `kappa`.
    pub fn covariance_multiplier(&self, d: usize, kappa: f64) -> f64 {
        self.amplitude * (1.0 + self.corr_length * kappa).powf(-(d as f64 + self.alpha))
    }

    /// `sum_{k != 0} c_hat(k) / n_points^d`: the node variance of the raw field.
    pub fn node_variance(&self, grid: &TorusGrid) -> f64 {
        let total: f64 = (1..grid.nodes()).map(|m| self.covariance_multiplier(grid.d, mode_kappa(grid, m))).sum();
        total / grid.nodes() as f64
    }

    /// Amplitude giving the raw field node variance `target` on `grid`.
    pub fn amplitude_for_node_variance(&self, grid: &TorusGrid, target: f64) -> f64 {
        let unit = FieldSpec { amplitude: 1.0, ..self.clone() };
        target / unit.node_variance(grid)
    }
}

/// Physical wavenumber magnitude `|2 pi k / L|` of a mode (signed indices,
/// Nyquist kept at `n/2`).
fn mode_kappa(grid: &TorusGrid, mode: usize) -> f64 {
    let n = grid.n_points;
    let idx = grid.multi_index(mode);
    let scale = 2.0 * std::f64::consts::PI / grid.box_side;
    (0..grid.d)
        .map(|a| {
            let j = if idx[a] <= n / 2 { idx[a] as f64 } else { idx[a] as f64 - n as f64 };
            (scale * j).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Parameter field with values in the open unit ball of `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterField<S> {
    omega: GridField<S>,
    seed: u64,
}

impl<S: Real> ParameterField<S> {
    /// Wraps node values that already lie in the closed unit ball.
    pub fn new(omega: GridField<S>, seed: u64) -> Result<Self> {
        let n = match omega.rank() {
            Rank::Channels(n) => n,
            other => return Err(Error::ShapeMismatch(format!("parameter field needs channels, got {other:?}"))),
        };
        let mut buf = vec![S::zero(); n];
        for node in 0..omega.grid().nodes() {
            omega.node_into(node, &mut buf);
            let norm2: S = buf.iter().map(|&v| v * v).sum();
            if norm2 > S::one() {
                return Err(Error::InvalidParameter(format!("|omega| > 1 at node {node}")));
            }
        }
        Ok(Self { omega, seed })
    }

    /// Spatially constant parameter field.
    pub fn constant(grid: TorusGrid, value: &[S]) -> Result<Self> {
        Self::new(GridField::constant(grid, Rank::Channels(value.len()), value), 0)
    }

    pub fn grid(&self) -> &TorusGrid {
        self.omega.grid()
    }

    pub fn n_components(&self) -> usize {
        self.omega.n_components()
    }

    pub fn omega(&self) -> &GridField<S> {
        &self.omega
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn node_into(&self, node: usize, out: &mut [S]) {
        self.omega.node_into(node, out)
    }

    /// `omega + t * delta`, required to stay inside the closed unit ball.
    pub fn perturbed(&self, delta: &GridField<S>, t: S) -> Result<Self> {
        let mut omega = self.omega.clone();
        omega.axpy(t, delta)?;
        Self::new(omega, self.seed)
    }

    pub fn cast<T: Real>(&self) -> ParameterField<T> {
        ParameterField { omega: self.omega.cast(), seed: self.seed }
    }
}

fn mode_normal(base: &ChaCha8Rng, mode: usize) -> Complex64 {
    let mut rng = base.clone();
    rng.set_stream(mode as u64);
    rng.set_word_pos(0);
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Complex node values of one synthesized channel before taking real parts.
pub(crate) fn synthesize_channel(spec: &FieldSpec, grid: &TorusGrid, seed: u64, channel: usize) -> Vec<Complex64> {
    let nodes = grid.nodes();
    let base = ChaCha8Rng::seed_from_u64(mix64(seed, channel as u64));
    let white: Vec<Complex64> = (0..nodes).map(|m| mode_normal(&base, m)).collect();
    let spectral = Spectral::<f64>::new(*grid);
    let norm = (nodes as f64).sqrt();
    let mut spec_vals: Vec<Complex64> = (0..nodes)
        .map(|m| {
            if m == 0 {
                return Complex64::new(0.0, 0.0);
            }
            let neg = {
                let idx = grid.multi_index(m);
                let mut nidx = [0usize; 3];
                for a in 0..grid.d {
                    nidx[a] = (grid.n_points - idx[a]) % grid.n_points;
                }
                grid.linear_index(&nidx[..grid.d])
            };
            // Hermitian symmetrization keeps E|Y_k|^2 = 1 on every mode
            let y = (white[m] + white[neg].conj()) * std::f64::consts::FRAC_1_SQRT_2;
            y * (spec.covariance_multiplier(grid.d, mode_kappa(grid, m)).sqrt() * norm)
        })
        .collect();
    spectral.ifft(&mut spec_vals);
    spec_vals
}

/// Raw centered Gaussian field with `spec.n_components` independent channels.
///
/// Each Fourier mode draws from its own counter-based ChaCha stream keyed by
/// `(seed, channel, mode)`, so the output is independent of evaluation order.
pub fn sample_gaussian<S: Real>(spec: &FieldSpec, grid: &TorusGrid, seed: u64) -> Result<GridField<S>> {
    spec.validate()?;
    let nodes = grid.nodes();
    let mut values = Vec::with_capacity(nodes * spec.n_components);
    for c in 0..spec.n_components {
        let shift = spec.offset.as_ref().map_or(0.0, |o| o[c]);
        if spec.amplitude == 0.0 {
            values.extend(std::iter::repeat(S::of(shift)).take(nodes));
            continue;
        }
        let channel = synthesize_channel(spec, grid, seed, c);
        values.extend(channel.into_iter().map(|z| S::of(z.re + shift)));
    }
    GridField::from_values(*grid, Rank::Channels(spec.n_components), values)
}

/// The clipping map `beta(s) = s / sqrt(1 + |s|^2)` on one node vector.
pub fn beta<S: Real>(s: &[S], out: &mut [S]) {
    let norm2: S = s.iter().map(|&v| v * v).sum();
    let scale = S::one() / (S::one() + norm2).sqrt();
    for (o, &v) in out.iter_mut().zip(s) {
        *o = v * scale;
    }
}

/// Applies [`beta`] node-wise, mapping a raw field into the open unit ball.
pub fn clip<S: Real>(raw: &GridField<S>, seed: u64) -> Result<ParameterField<S>> {
    let n = raw.n_components();
    let mut out = GridField::zeros(*raw.grid(), raw.rank());
    let mut s = vec![S::zero(); n];
    let mut b = vec![S::zero(); n];
    for node in 0..raw.grid().nodes() {
        raw.node_into(node, &mut s);
        beta(&s, &mut b);
        out.set_node(node, &b);
    }
    ParameterField::new(out, seed)
}

/// Sample and clip in one step.
pub fn sample_parameter_field<S: Real>(spec: &FieldSpec, grid: &TorusGrid, seed: u64) -> Result<ParameterField<S>> {
    clip(&sample_gaussian(spec, grid, seed)?, seed)
}

/// Maximum of `|omega(x) - omega(y)| / |x - y|^eta` over node pairs within
/// periodic distance `radius`.
pub fn hoelder_seminorm<S: Real>(field: &ParameterField<S>, eta: f64, radius: f64) -> Result<f64> {
    let grid = *field.grid();
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidParameter(format!("eta = {eta} not in (0, 1)")));
    }
    let h = grid.spacing();
    if radius < h {
        return Err(Error::InvalidParameter("radius below grid spacing".into()));
    }
    let reach = ((radius / h).floor() as i64).min(grid.n_points as i64 / 2);
    // half-space of integer offsets within the radius
    let mut offsets = Vec::new();
    let span = |a: usize| if a < grid.d { -reach..=reach } else { 0..=0 };
    for i in span(0) {
        for j in span(1) {
            for k in span(2) {
                let o = [i, j, k];
                let first_nonzero = o.iter().find(|&&v| v != 0);
                if first_nonzero.map_or(true, |&v| v < 0) {
                    continue;
                }
                let dist = (o.iter().map(|&v| (v * v) as f64).sum::<f64>()).sqrt() * h;
                if dist <= radius * (1.0 + 1e-12) {
                    offsets.push((o, dist));
                }
            }
        }
    }
    let n = field.n_components();
    let np = grid.n_points as i64;
    let (mut a, mut b) = (vec![S::zero(); n], vec![S::zero(); n]);
    let mut best = 0.0f64;
    for node in 0..grid.nodes() {
        let idx = grid.multi_index(node);
        field.node_into(node, &mut a);
        for (o, dist) in &offsets {
            let mut other = [0usize; 3];
            for ax in 0..grid.d {
                other[ax] = ((idx[ax] as i64 + o[ax]).rem_euclid(np)) as usize;
            }
            field.node_into(grid.linear_index(&other[..grid.d]), &mut b);
            let diff: f64 = a.iter().zip(&b).map(|(&x, &y)| (x - y).to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            best = best.max(diff / dist.powf(eta));
        }
    }
    Ok(best)
}
