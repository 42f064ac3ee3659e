//! Higher-order linearized correctors indexed by subsets of a direction set,
//! their fluxes, the flux correctors `sigma` and `psi`, and the first-order
//! dual corrector.

mod partition;

pub use partition::{elements, partitions, partitions_of, subset_label, subsets_by_size, Partition, Subset, MAX_ORDER};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corrector::{ConstitutiveLaw, CorrectorState, SolverOptions};
use crate::error::{Error, Result};
use crate::grid::{elliptic_solve, write_field, GridField, Mass, Rank, Spectral};
use crate::scalar::Real;

/// Ordered unit directions `v_1, ..., v_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet<S> {
    vectors: Vec<Vec<S>>,
}

impl<S: Real> DirectionSet<S> {
    pub fn new(vectors: Vec<Vec<S>>) -> Result<Self> {
        if vectors.is_empty() || vectors.len() > MAX_ORDER {
            return Err(Error::InvalidParameter(format!("need 1..={MAX_ORDER} directions, got {}", vectors.len())));
        }
        let d = vectors[0].len();
        for v in &vectors {
            let norm: f64 = v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            if v.len() != d || (norm - 1.0).abs() > 1e-12f64.max(8.0 * S::epsilon().to_f64_lossy()) {
                return Err(Error::InvalidParameter(format!("direction {v:?} is not a unit vector in R^{d}")));
            }
        }
        Ok(Self { vectors })
    }

    /// Normalizes each vector before validating.
    pub fn normalized(vectors: Vec<Vec<S>>) -> Result<Self> {
        let unit = vectors
            .into_iter()
            .map(|v| {
                let n = v.iter().map(|&x| x * x).sum::<S>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Self::new(unit)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vector(&self, i: usize) -> &[S] {
        &self.vectors[i]
    }

    pub fn full_set(&self) -> Subset {
        (1 << self.len()) - 1
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.vectors.iter().map(|v| v.iter().map(|x| x.to_f64_lossy()).collect()).collect()
    }
}

/// One solved linearized corrector with its flux.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedCorrector<S> {
    pub phi: GridField<S>,
    pub grad_phi: GridField<S>,
    pub flux: GridField<S>,
    /// Relative Krylov residual certificate.
    pub residual: f64,
}

/// Base corrector plus linearized correctors for a downward-closed family of subsets.
#[derive(Clone, Debug)]
pub struct CorrectorFamily<S> {
    pub base: CorrectorState<S>,
    pub dirs: DirectionSet<S>,
    entries: BTreeMap<Subset, LinearizedCorrector<S>>,
    sigma: BTreeMap<Subset, GridField<S>>,
    psi: BTreeMap<Subset, GridField<S>>,
    decomposition: BTreeMap<Subset, f64>,
}

impl<S: Real> CorrectorFamily<S> {
    pub fn new(base: CorrectorState<S>, dirs: DirectionSet<S>) -> Result<Self> {
        if dirs.dim() != base.xi.len() {
            return Err(Error::ShapeMismatch("direction dimension differs from xi".into()));
        }
        Ok(Self {
            base,
            dirs,
            entries: BTreeMap::new(),
            sigma: BTreeMap::new(),
            psi: BTreeMap::new(),
            decomposition: BTreeMap::new(),
        })
    }

    pub fn mass(&self) -> Mass {
        self.base.mass
    }

    pub fn get(&self, s: Subset) -> Option<&LinearizedCorrector<S>> {
        self.entries.get(&s)
    }

    pub fn contains(&self, s: Subset) -> bool {
        s == 0 || self.entries.contains_key(&s)
    }

    pub fn subsets(&self) -> impl Iterator<Item = Subset> + '_ {
        self.entries.keys().copied()
    }

    fn entry(&self, s: Subset) -> Result<&LinearizedCorrector<S>> {
        self.entries.get(&s).ok_or_else(|| Error::MissingSubcorrector(subset_label(s)))
    }

    /// Corrector for `s`; the empty set is the base corrector.
    pub fn phi(&self, s: Subset) -> Result<&GridField<S>> {
        if s == 0 {
            Ok(&self.base.phi)
        } else {
            Ok(&self.entry(s)?.phi)
        }
    }

    pub fn grad_phi(&self, s: Subset) -> Result<&GridField<S>> {
        if s == 0 {
            Ok(&self.base.grad_phi)
        } else {
            Ok(&self.entry(s)?.grad_phi)
        }
    }

    pub fn flux(&self, s: Subset) -> Result<&GridField<S>> {
        if s == 0 {
            Ok(&self.base.flux)
        } else {
            Ok(&self.entry(s)?.flux)
        }
    }

    pub fn sigma(&self, s: Subset) -> Option<&GridField<S>> {
        self.sigma.get(&s)
    }

    pub fn psi(&self, s: Subset) -> Option<&GridField<S>> {
        self.psi.get(&s)
    }

    pub fn decomposition_residual(&self, s: Subset) -> Option<f64> {
        self.decomposition.get(&s).copied()
    }

    /// Every cached subset has all its nonempty proper subsets cached.
    pub fn is_downward_closed(&self) -> bool {
        self.entries.keys().all(|&s| proper_subsets(s).all(|t| self.entries.contains_key(&t)))
    }

    fn require_proper_subsets(&self, s: Subset) -> Result<()> {
        let mut subs: Vec<Subset> = proper_subsets(s).collect();
        subs.sort_unstable();
        for t in subs {
            if !self.entries.contains_key(&t) {
                return Err(Error::MissingSubcorrector(subset_label(t)));
            }
        }
        Ok(())
    }

    /// Solves `phi_s` and its flux; all proper subsets must already be cached.
    pub fn solve(&mut self, spectral: &Spectral<S>, law: &(impl ConstitutiveLaw<S> + ?Sized), s: Subset, opts: &SolverOptions) -> Result<()> {
        if s == 0 || s > self.dirs.full_set() {
            return Err(Error::InvalidParameter(format!("subset {s:#b} outside the direction set")));
        }
        self.require_proper_subsets(s)?;
        let g_s = assemble_rhs(self, s, law)?;
        let a = &self.base.lin_coeff;
        let mut g = g_s.clone();
        if s.count_ones() == 1 {
            let v = self.dirs.vector(s.trailing_zeros() as usize);
            g.axpy(S::one(), &a.mat_const_vec(v)?)?;
        }
        let (phi, report) = elliptic_solve(spectral, a, self.mass(), &g, None, &opts.elliptic())?;
        let grad_phi = spectral.gradient(&phi)?;
        let mut flux = a.mat_vec(&grad_phi)?;
        flux.axpy(S::one(), &g)?;
        self.entries.insert(s, LinearizedCorrector { phi, grad_phi, flux, residual: report.residual });
        Ok(())
    }

    /// Solves every nonempty subset of the direction set, smallest first.
    pub fn solve_all(&mut self, spectral: &Spectral<S>, law: &(impl ConstitutiveLaw<S> + ?Sized), opts: &SolverOptions) -> Result<()> {
        for s in subsets_by_size(self.dirs.len()) {
            if !self.entries.contains_key(&s) {
                self.solve(spectral, law, s, opts)?;
            }
        }
        Ok(())
    }

    /// Computes and stores `sigma_s`, `psi_s` (finite `T`) and the decomposition residual.
    pub fn attach_flux_correctors(&mut self, spectral: &Spectral<S>, s: Subset) -> Result<f64> {
        let mass = self.mass();
        let q = self.flux(s)?.clone();
        let sigma = solve_sigma(spectral, &q, mass)?;
        let psi = if mass.is_infinite() { None } else { Some(solve_psi(spectral, &q, self.grad_phi(s)?, mass)?) };
        let r = helmholtz_residual(spectral, &q, &sigma, psi.as_ref(), mass)?;
        self.sigma.insert(s, sigma);
        if let Some(p) = psi {
            self.psi.insert(s, p);
        }
        self.decomposition.insert(s, r);
        Ok(r)
    }

    /// Flux correctors for the base corrector and every cached subset.
    pub fn attach_all_flux_correctors(&mut self, spectral: &Spectral<S>) -> Result<()> {
        let keys: Vec<Subset> = std::iter::once(0).chain(self.entries.keys().copied()).collect();
        for s in keys {
            self.attach_flux_correctors(spectral, s)?;
        }
        Ok(())
    }

    /// Writes the base corrector under `base/`, `phi_S1-3.fld`-style files per
    /// subset and `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>, seeds: &[u64]) -> Result<FamilyManifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.base.save(dir.join("base"), seeds)?;
        let mut entries = Vec::new();
        let keys: Vec<Subset> = std::iter::once(0).chain(self.entries.keys().copied()).collect();
        for s in keys {
            let label = subset_label(s);
            if s != 0 {
                let e = self.entry(s)?;
                write_field(dir.join(format!("phi_S{label}.fld")), &e.phi)?;
                write_field(dir.join(format!("flux_S{label}.fld")), &e.flux)?;
            }
            if let Some(sig) = self.sigma.get(&s) {
                write_field(dir.join(format!("sigma_S{label}.fld")), sig)?;
            }
            if let Some(p) = self.psi.get(&s) {
                write_field(dir.join(format!("psi_S{label}.fld")), p)?;
            }
            entries.push(ManifestEntry {
                subset: elements(s).iter().map(|i| i + 1).collect(),
                label,
                residual: if s == 0 { self.base.residual } else { self.entry(s)?.residual },
                phi_l2: self.phi(s)?.l2_norm().to_f64_lossy(),
                grad_phi_l2: self.grad_phi(s)?.l2_norm().to_f64_lossy(),
                flux_mean: self.flux(s)?.mean().iter().map(|v| v.to_f64_lossy()).collect(),
                decomposition_residual: self.decomposition.get(&s).copied(),
            });
        }
        let manifest = FamilyManifest {
            xi: self.base.xi.iter().map(|v| v.to_f64_lossy()).collect(),
            mass: self.mass(),
            directions: self.dirs.to_f64(),
            seeds: seeds.to_vec(),
            entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// One-based direction indices.
    pub subset: Vec<usize>,
    pub label: String,
    pub residual: f64,
    pub phi_l2: f64,
    pub grad_phi_l2: f64,
    pub flux_mean: Vec<f64>,
    pub decomposition_residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyManifest {
    pub xi: Vec<f64>,
    #[serde(rename = "T")]
    pub mass: Mass,
    pub directions: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub entries: Vec<ManifestEntry>,
}

fn proper_subsets(s: Subset) -> impl Iterator<Item = Subset> {
    // standard sub-mask enumeration, excluding s itself and the empty set
    let mut t = s;
    std::iter::from_fn(move || {
        if t == 0 {
            return None;
        }
        t = (t - 1) & s;
        if t == 0 {
            None
        } else {
            Some(t)
        }
    })
}

/// `G_s = sum over partitions P != {s} of d_xi^{|P|} A(x, xi + grad phi)[w_p, p in P]`
/// with `w_p = 1_{|p| = 1} v_p + grad phi_p`; zero for singletons.
pub fn assemble_rhs<S: Real>(family: &CorrectorFamily<S>, s: Subset, law: &(impl ConstitutiveLaw<S> + ?Sized)) -> Result<GridField<S>> {
    let grid = *family.base.phi.grid();
    let d = grid.d;
    let mut out = GridField::zeros(grid, Rank::Vector);
    let parts: Vec<Partition> = partitions_of(s)?.into_iter().filter(|p| p.len() > 1).collect();
    if parts.is_empty() {
        return Ok(out);
    }
    let mut grads: BTreeMap<Subset, &GridField<S>> = BTreeMap::new();
    for p in &parts {
        for &b in p {
            if let std::collections::btree_map::Entry::Vacant(slot) = grads.entry(b) {
                slot.insert(family.grad_phi(b)?);
            }
        }
    }
    let xi = &family.base.xi;
    let mut p = [S::zero(); 3];
    let mut w = [[S::zero(); 3]; MAX_ORDER];
    let mut term = [S::zero(); 3];
    for node in 0..grid.nodes() {
        family.base.grad_phi.node_into(node, &mut p[..d]);
        (0..d).for_each(|i| p[i] = p[i] + xi[i]);
        let mut acc = [S::zero(); 3];
        for part in &parts {
            for (slot, &b) in part.iter().enumerate() {
                grads[&b].node_into(node, &mut w[slot][..d]);
                if b.count_ones() == 1 {
                    let v = family.dirs.vector(b.trailing_zeros() as usize);
                    (0..d).for_each(|i| w[slot][i] = w[slot][i] + v[i]);
                }
            }
            let refs: Vec<&[S]> = w[..part.len()].iter().map(|x| &x[..d]).collect();
            law.d_xi(node, &p[..d], &refs, &mut term[..d])?;
            (0..d).for_each(|i| acc[i] = acc[i] + term[i]);
        }
        out.set_node(node, &acc[..d]);
    }
    Ok(out)
}

/// `q_s = a (1_{|s| = 1} v_s + grad phi_s) + G_s`, recomputed from the cache.
pub fn linearized_flux<S: Real>(family: &CorrectorFamily<S>, s: Subset, law: &(impl ConstitutiveLaw<S> + ?Sized)) -> Result<GridField<S>> {
    let a = &family.base.lin_coeff;
    let mut q = a.mat_vec(family.grad_phi(s)?)?;
    if s.count_ones() == 1 {
        q.axpy(S::one(), &a.mat_const_vec(family.dirs.vector(s.trailing_zeros() as usize))?)?;
    }
    q.axpy(S::one(), &assemble_rhs(family, s, law)?)?;
    Ok(q)
}

/// Skew matrix field with `(1/T - Laplacian) sigma_kl = d_l q_k - d_k q_l`.
pub fn solve_sigma<S: Real>(spectral: &Spectral<S>, q: &GridField<S>, mass: Mass) -> Result<GridField<S>> {
    let grid = *spectral.grid();
    let d = grid.d;
    if q.rank() != Rank::Vector {
        return Err(Error::ShapeMismatch("sigma needs a vector flux".into()));
    }
    let mut sigma = GridField::zeros(grid, Rank::Matrix);
    let grads: Vec<GridField<S>> = (0..d)
        .map(|k| {
            let qk = GridField::from_values(grid, Rank::Scalar, q.component(k).to_vec())?;
            spectral.gradient(&qk)
        })
        .collect::<Result<_>>()?;
    for k in 0..d {
        for l in k + 1..d {
            let rhs: Vec<S> = grads[k].component(l).iter().zip(grads[l].component(k)).map(|(&a, &b)| a - b).collect();
            let mut rhs = GridField::from_values(grid, Rank::Scalar, rhs)?;
            // a derivative has no zero mode; drop its round-off mean
            rhs.remove_mean();
            let s_kl = spectral.helmholtz_solve(mass, &rhs)?;
            sigma.component_mut(k * d + l).copy_from_slice(s_kl.values());
            sigma.component_mut(l * d + k).iter_mut().zip(s_kl.values()).for_each(|(o, &v)| *o = -v);
        }
    }
    Ok(sigma)
}

/// `(1/T - Laplacian) psi = q - mean(q) - grad phi` component-wise; needs finite `T`.
pub fn solve_psi<S: Real>(spectral: &Spectral<S>, q: &GridField<S>, grad_phi: &GridField<S>, mass: Mass) -> Result<GridField<S>> {
    if mass.is_infinite() {
        return Err(Error::InvalidParameter("psi is only formed for finite T".into()));
    }
    let mut rhs = q.sub(grad_phi)?;
    let mean = q.mean();
    for (c, m) in mean.into_iter().enumerate() {
        rhs.component_mut(c).iter_mut().for_each(|v| *v = *v - m);
    }
    spectral.helmholtz_solve(mass, &rhs)
}

/// `|q - mean(q) - div sigma - psi/T| / |q - mean(q)|`, where for `T = inf`
/// the modes annihilated by every derivative are projected out of `q` and `psi`
/// is absent.
pub fn helmholtz_residual<S: Real>(
    spectral: &Spectral<S>,
    q: &GridField<S>,
    sigma: &GridField<S>,
    psi: Option<&GridField<S>>,
    mass: Mass,
) -> Result<f64> {
    let mut fluct = q.clone();
    for (c, m) in q.mean().into_iter().enumerate() {
        fluct.component_mut(c).iter_mut().for_each(|v| *v = *v - m);
    }
    let mut r = if mass.is_infinite() { spectral.project_null_modes(&fluct)? } else { fluct.clone() };
    r.axpy(-S::one(), &spectral.matrix_divergence(sigma)?)?;
    if let (Some(p), false) = (psi, mass.is_infinite()) {
        r.axpy(-S::of(mass.inverse()), p)?;
    }
    let num = r.l2_norm().to_f64_lossy();
    let den = fluct.l2_norm().to_f64_lossy().max(1e-12 * q.l2_norm().to_f64_lossy()).max(f64::MIN_POSITIVE);
    Ok(if num == 0.0 { 0.0 } else { num / den })
}

/// First-order dual corrector `(1/T) u - div a^t (e + grad u) = 0` and its
/// flux `a^t (e + grad u)`, with `a` the linearized coefficient of `base`.
pub fn solve_dual_first_order<S: Real>(
    spectral: &Spectral<S>,
    base: &CorrectorState<S>,
    e: &[S],
    opts: &SolverOptions,
) -> Result<(GridField<S>, GridField<S>)> {
    let at = base.lin_coeff.transpose()?;
    let g = at.mat_const_vec(e)?;
    let (phi, _) = elliptic_solve(spectral, &at, base.mass, &g, None, &opts.elliptic())?;
    let mut q = at.mat_vec(&spectral.gradient(&phi)?)?;
    q.axpy(S::one(), &g)?;
    Ok((phi, q))
}
