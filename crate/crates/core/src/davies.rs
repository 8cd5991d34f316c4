//! Davies data `(Υ, ν)`, the Lindblad generator built from it, and the
//! semigroup it generates.

use crate::linalg::{
    c, expm, fro, gauss_legendre, kron, min_eigenvalue_hermitian, op_norm, unvectorize, vectorize, zeros, CMat,
    CVec, I,
};
use crate::system_model::{
    bohr_frequencies, DiscretizedReservoir, ModelError, ReservoirModel, Segment, SegmentLabel, SmallSystem,
};
use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DaviesError {
    #[error("resolvent smearing eta0 = {eta0} is below the grid spacing {spacing}")]
    EtaBelowSpacing { eta0: f64, spacing: f64 },
    #[error("resonance x = {x} sits on a reservoir interval endpoint")]
    ResonanceOnEdge { x: f64 },
    #[error("dissipativity residual {residual:.3e} exceeds tolerance {tol:.1e}")]
    NotDissipative { residual: f64, tol: f64 },
    #[error(
        "horizon {horizon} exceeds half the recurrence time {limit:.3} of the grid; use grid spacing below {required:.3e}"
    )]
    HorizonTooLong { horizon: f64, limit: f64, required: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpsilonMethod {
    /// Residue plus principal value with singularity subtraction.
    Plemelj { panels: usize },
    /// `η`-smeared resolvent on a dense midpoint grid, Richardson-extrapolated in `η`.
    ResolventEta { grid_spacing: f64, eta0: Option<f64> },
}

impl UpsilonMethod {
    pub fn plemelj() -> Self {
        Self::Plemelj { panels: 64 }
    }

    pub fn resolvent() -> Self {
        Self::ResolventEta { grid_spacing: 1e-4, eta0: None }
    }
}

/// `ν_ω` for one channel, shape `(d · dim 𝔥_ω) × d`.
#[derive(Clone, Debug)]
pub struct NuBlock {
    pub omega: f64,
    pub multiplicity: usize,
    /// Offset of `𝔥_ω` inside `𝔥`.
    pub offset: usize,
    pub matrix: CMat,
}

#[derive(Clone, Debug)]
pub struct NuData {
    pub blocks: Vec<NuBlock>,
    /// Stacked `ν`, rows `k · dim 𝔥 + s`.
    pub nu: CMat,
    pub noise_dim: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct DaviesData {
    pub dim: usize,
    pub upsilon: CMat,
    pub nu_blocks: Vec<NuBlock>,
    pub nu: CMat,
    pub noise_dim: usize,
    pub dissipativity_residual: f64,
    pub warnings: Vec<String>,
}

impl DaviesData {
    /// `d × d` slice `ν_s = (1 ⊗ ⟨s|) ν` for noise mode `s`.
    pub fn nu_slice(&self, s: usize) -> CMat {
        nu_slice(&self.nu, self.dim, self.noise_dim, s)
    }

    pub fn nu_slices(&self) -> Vec<CMat> {
        (0..self.noise_dim).map(|s| self.nu_slice(s)).collect()
    }

    /// `ν* ν = Σ_s ν_s† ν_s`.
    pub fn nu_star_nu(&self) -> CMat {
        self.nu.adjoint() * &self.nu
    }

    pub fn re_upsilon(&self) -> CMat {
        (&self.upsilon + self.upsilon.adjoint()) * c(0.5, 0.0)
    }

    /// `e^{-i t Υ}`.
    pub fn contraction(&self, t: f64) -> CMat {
        expm(&(&self.upsilon * c(0.0, -t)))
    }

    /// A copy with the coupling switched off.
    pub fn decoupled(&self) -> Self {
        let mut out = self.clone();
        out.upsilon = self.re_upsilon();
        out.nu = zeros(self.nu.nrows(), self.dim);
        for b in &mut out.nu_blocks {
            b.matrix.fill(c(0.0, 0.0));
        }
        out.dissipativity_residual = 0.0;
        out
    }
}

pub fn nu_slice(nu: &CMat, d: usize, m: usize, s: usize) -> CMat {
    CMat::from_fn(d, d, |k, l| nu[(k * m + s, l)])
}

pub fn dissipativity_residual(upsilon: &CMat, nu: &CMat) -> f64 {
    let lhs = upsilon * c(0.0, -1.0) + upsilon.adjoint() * I;
    fro(&(lhs + nu.adjoint() * nu))
}

/// `v(x)† (P ⊗ 1) v(x)` for one segment.
fn sandwich(seg: &Segment, projector: &CMat, x: f64) -> CMat {
    let v = seg.form_factor(x);
    let p = kron(projector, &CMat::identity(seg.multiplicity, seg.multiplicity));
    v.adjoint() * p * v
}

pub fn compute_nu(sys: &SmallSystem, res: &ReservoirModel) -> NuData {
    let d = sys.dim;
    let bohr = bohr_frequencies(sys);
    let offsets = res.noise_offsets();
    let m_total = res.noise_dim();
    let mut warnings = Vec::new();
    let mut blocks = Vec::new();
    let mut nu = zeros(d * m_total, d);
    for (fi, &omega) in bohr.frequencies.iter().enumerate() {
        let Some(ci) = res.channels.iter().position(|ch| matches!(ch.label, SegmentLabel::Bohr(w) if w == omega))
        else {
            warnings.push(format!("no channel for Bohr frequency {omega}; its jump operator is zero"));
            continue;
        };
        let ch = &res.channels[ci];
        let m = ch.multiplicity;
        let v = ch.form_factor(omega);
        let mut block = zeros(d * m, d);
        for &(k, kp) in &bohr.pair_map[fi] {
            // Emission out of the k-eigenspace into k' = k − ω.
            let pk = &sys.spectrum[k].projector;
            let pkp = kron(&sys.spectrum[kp].projector, &CMat::identity(m, m));
            block += pkp * &v * pk;
        }
        block *= c((2.0 * PI).sqrt(), 0.0);
        for k in 0..d {
            for mu in 0..m {
                for l in 0..d {
                    nu[(k * m_total + offsets[ci] + mu, l)] = block[(k * m + mu, l)];
                }
            }
        }
        blocks.push(NuBlock { omega, multiplicity: m, offset: offsets[ci], matrix: block });
    }
    NuData { blocks, nu, noise_dim: m_total, warnings }
}

fn composite_gauss(a: f64, b: f64, panels: usize, nodes: &(Vec<f64>, Vec<f64>), mut f: impl FnMut(f64, f64)) {
    let h = (b - a) / panels as f64;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (x, w) in nodes.0.iter().zip(&nodes.1) {
            f(lo + 0.5 * h * (x + 1.0), 0.5 * h * w);
        }
    }
}

/// `∫_0^∞ V* e^{-iu(K + H_R − E)} V du` from the continuum form factor.
fn resolvent_plemelj(sys: &SmallSystem, res: &ReservoirModel, energy: f64, panels: usize) -> Result<CMat, DaviesError> {
    let d = sys.dim;
    let nodes = gauss_legendre(16);
    let mut out = zeros(d, d);
    for space in &sys.spectrum {
        let xr = energy - space.energy;
        for seg in res.segments() {
            let (a, b) = seg.interval;
            let width = b - a;
            if (xr - a).abs() < 1e-12 * width || (xr - b).abs() < 1e-12 * width {
                return Err(DaviesError::ResonanceOnEdge { x: xr });
            }
            let f = |x: f64| sandwich(seg, &space.projector, x);
            let anchor = xr.clamp(a, b);
            let f_anchor = f(anchor);
            let mut pv = &f_anchor * c(((b - xr) / (a - xr)).abs().ln(), 0.0);
            let mut regular = |lo: f64, hi: f64| {
                composite_gauss(lo, hi, panels, &nodes, |x, w| {
                    pv += (f(x) - &f_anchor) * c(w / (x - xr), 0.0);
                });
            };
            if seg.contains(xr) {
                regular(a, xr);
                regular(xr, b);
                out += &f_anchor * c(PI, 0.0);
            } else {
                regular(a, b);
            }
            out -= pv * I;
        }
    }
    Ok(out)
}

/// `Σ ∫ F(x) / (i(x − x_r) + η) dx` on a dense midpoint grid, extrapolated to `η → 0`.
fn resolvent_eta(
    sys: &SmallSystem,
    res: &ReservoirModel,
    energy: f64,
    spacing: f64,
    eta0: f64,
) -> Result<CMat, DaviesError> {
    if eta0 < spacing {
        return Err(DaviesError::EtaBelowSpacing { eta0, spacing });
    }
    let d = sys.dim;
    let mut r1 = zeros(d, d);
    let mut r2 = zeros(d, d);
    for seg in res.segments() {
        let (a, b) = seg.interval;
        let n = ((b - a) / spacing).ceil() as usize;
        let h = (b - a) / n as f64;
        let m = seg.multiplicity;
        let coupling = &seg.coupling;
        let kernels: Vec<CMat> = sys
            .spectrum
            .iter()
            .map(|s| coupling.adjoint() * kron(&s.projector, &CMat::identity(m, m)) * coupling)
            .collect();
        for (space, kernel) in sys.spectrum.iter().zip(&kernels) {
            let xr = energy - space.energy;
            let (mut s1, mut s2) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            for i in 0..n {
                let x = a + (i as f64 + 0.5) * h;
                let p = seg.profile.eval(x).norm_sqr() * h;
                s1 += p / Complex64::new(eta0, x - xr);
                s2 += p / Complex64::new(0.5 * eta0, x - xr);
            }
            r1 += kernel * s1;
            r2 += kernel * s2;
        }
    }
    Ok(r2 * c(2.0, 0.0) - r1)
}

fn resolvent(sys: &SmallSystem, res: &ReservoirModel, energy: f64, method: UpsilonMethod) -> Result<CMat, DaviesError> {
    match method {
        UpsilonMethod::Plemelj { panels } => resolvent_plemelj(sys, res, energy, panels),
        UpsilonMethod::ResolventEta { grid_spacing, eta0 } => {
            resolvent_eta(sys, res, energy, grid_spacing, eta0.unwrap_or(10.0 * grid_spacing))
        }
    }
}

pub fn compute_upsilon(
    sys: &SmallSystem,
    res: &ReservoirModel,
    method: UpsilonMethod,
) -> Result<DaviesData, DaviesError> {
    let d = sys.dim;
    let nu = compute_nu(sys, res);
    let mut warnings = nu.warnings.clone();
    let mut upsilon = zeros(d, d);
    for space in &sys.spectrum {
        for other in &sys.spectrum {
            let xr = space.energy - other.energy;
            if !res.segments().any(|s| s.contains(xr)) {
                warnings.push(format!("resonance x = {xr} lies outside every reservoir interval"));
            }
        }
        let r = resolvent(sys, res, space.energy, method)?;
        upsilon += &space.projector * r * &space.projector * c(0.0, -1.0);
    }
    warnings.sort();
    warnings.dedup();
    let residual = dissipativity_residual(&upsilon, &nu.nu);
    Ok(DaviesData {
        dim: d,
        upsilon,
        nu_blocks: nu.blocks,
        nu: nu.nu,
        noise_dim: nu.noise_dim,
        dissipativity_residual: residual,
        warnings,
    })
}

/// Relative difference of `Υ` between the two methods.
pub fn upsilon_method_gap(sys: &SmallSystem, res: &ReservoirModel) -> Result<f64, DaviesError> {
    let a = compute_upsilon(sys, res, UpsilonMethod::plemelj())?;
    let b = compute_upsilon(sys, res, UpsilonMethod::resolvent())?;
    let scale = fro(&a.upsilon).max(1e-300);
    Ok(if fro(&a.upsilon) == 0.0 && fro(&b.upsilon) == 0.0 { 0.0 } else { fro(&(a.upsilon - b.upsilon)) / scale })
}

pub const DISSIPATIVITY_TOL: f64 = 1e-8;

/// Heisenberg-picture generator `L(S) = −i(ΥS − SΥ*) + ν*(S ⊗ 1)ν` on column-stacked `S`.
#[derive(Clone, Debug)]
pub struct LindbladGenerator {
    pub dim: usize,
    pub superoperator: CMat,
    pub davies: DaviesData,
}

pub fn build_lindblad(dd: &DaviesData) -> Result<LindbladGenerator, DaviesError> {
    build_lindblad_with_tol(dd, DISSIPATIVITY_TOL)
}

pub fn build_lindblad_with_tol(dd: &DaviesData, tol: f64) -> Result<LindbladGenerator, DaviesError> {
    if dd.dissipativity_residual > tol {
        return Err(DaviesError::NotDissipative { residual: dd.dissipativity_residual, tol });
    }
    let d = dd.dim;
    let id = CMat::identity(d, d);
    let mut l = kron(&id, &(&dd.upsilon * c(0.0, -1.0))) + kron(&dd.upsilon.map(|z| z.conj()), &(&id * I));
    for nu_s in dd.nu_slices() {
        l += kron(&nu_s.transpose(), &nu_s.adjoint());
    }
    Ok(LindbladGenerator { dim: d, superoperator: l, davies: dd.clone() })
}

impl LindbladGenerator {
    pub fn apply(&self, s: &CMat) -> CMat {
        unvectorize(&(&self.superoperator * vectorize(s)), self.dim)
    }

    /// `e^{tL}` as a `d² × d²` matrix.
    pub fn propagator(&self, t: f64) -> CMat {
        expm(&(&self.superoperator * c(t, 0.0)))
    }

    /// Generator of the Schrödinger-picture semigroup on column-stacked density matrices.
    pub fn predual_superoperator(&self) -> CMat {
        let p = transpose_permutation(self.dim);
        &p * self.superoperator.transpose() * &p
    }

    /// Trace-one null vector of the predual generator.
    pub fn stationary_state(&self) -> CMat {
        let d = self.dim;
        let mut a = self.predual_superoperator();
        let mut rhs = CVec::zeros(d * d);
        for col in 0..d * d {
            a[(0, col)] = c(0.0, 0.0);
        }
        for k in 0..d {
            a[(0, k * d + k)] = c(1.0, 0.0);
        }
        rhs[0] = c(1.0, 0.0);
        let x = a.lu().solve(&rhs).expect("stationary state is not unique");
        unvectorize(&x, d)
    }

    /// Superoperator of `S ↦ i[K, S]`.
    pub fn free_generator(k: &CMat) -> CMat {
        let d = k.nrows();
        let id = CMat::identity(d, d);
        kron(&id, &(k * I)) - kron(&k.transpose(), &(&id * I))
    }
}

/// Matrix `P` with `P vec(S) = vec(Sᵀ)`.
pub fn transpose_permutation(d: usize) -> CMat {
    let mut p = zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            p[(i * d + j, j * d + i)] = c(1.0, 0.0);
        }
    }
    p
}

pub fn evolve_semigroup(l: &LindbladGenerator, t: f64, s: &CMat) -> CMat {
    unvectorize(&(l.propagator(t) * vectorize(s)), l.dim)
}

/// Choi matrix `Σ |i⟩⟨j| ⊗ Λ(|i⟩⟨j|)` of a superoperator on column-stacked matrices.
pub fn choi_matrix(superop: &CMat, d: usize) -> CMat {
    let mut out = zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            let mut e = zeros(d, d);
            e[(i, j)] = c(1.0, 0.0);
            let img = unvectorize(&(superop * vectorize(&e)), d);
            for a in 0..d {
                for b in 0..d {
                    out[(i * d + a, j * d + b)] = img[(a, b)];
                }
            }
        }
    }
    out
}

pub fn choi_min_eigenvalue(l: &LindbladGenerator, t: f64) -> f64 {
    min_eigenvalue_hermitian(&choi_matrix(&l.propagator(t), l.dim))
}

#[derive(Clone, Debug)]
pub struct QIntegral {
    pub lambda: f64,
    pub s: f64,
    pub value: CMat,
    pub limit: CMat,
}

impl QIntegral {
    pub fn distance(&self) -> f64 {
        op_norm(&(&self.value - &self.limit))
    }
}

/// `∫_0^∞ V* e^{-iu(K + H_R)} V du` from the continuum form factor.
pub fn q_limit(sys: &SmallSystem, res: &ReservoirModel) -> Result<CMat, DaviesError> {
    resolvent_plemelj(sys, res, 0.0, 64)
}

/// `Q_{λ,s} = ∫_0^{λ⁻²s} V* e^{-iu(K + H_R)} V du` on the discretized reservoir.
///
/// The `u`-integral is done in closed form per mode; the horizon must stay
/// below half the grid recurrence time.
pub fn q_integral(
    sys: &SmallSystem,
    res: &ReservoirModel,
    disc: &DiscretizedReservoir,
    lambda: f64,
    s: f64,
) -> Result<QIntegral, DaviesError> {
    let horizon = s / (lambda * lambda);
    let limit = 0.5 * disc.recurrence_time();
    if horizon > limit {
        return Err(DaviesError::HorizonTooLong { horizon, limit, required: PI / horizon });
    }
    let d = sys.dim;
    let mut value = zeros(d, d);
    for (mode, v) in disc.modes.iter().zip(&disc.coupling) {
        for space in &sys.spectrum {
            let e = space.energy + mode.frequency;
            let integral = if (e * horizon).abs() < 1e-8 {
                c(horizon, -0.5 * e * horizon * horizon)
            } else {
                (c(1.0, 0.0) - Complex64::from_polar(1.0, -e * horizon)) / c(0.0, e)
            };
            value += v.adjoint() * &space.projector * v * integral;
        }
    }
    Ok(QIntegral { lambda, s, value, limit: q_limit(sys, res)? })
}
