//! Pauli-Fierz Hamiltonians on a particle-number-truncated bosonic Fock space
//! over the discretized reservoir, and the reduced quantities built from them.
//!
//! Vector layout: index `fock_state * d + k`.
//!
//! Interaction-picture conventions used throughout:
//! `T_λ(t, t₀) = e^{itH₀} e^{-i(t−t₀)H_λ} e^{-it₀H₀}`, a vertex at time `s`
//! carries `e^{isK} D e^{-isK}` (creation) or `e^{isK} D* e^{-isK}`
//! (annihilation), and a creation at `s_c` contracted with an annihilation
//! at `s_a > s_c` contributes `⟨φ_a| e^{-i(s_a − s_c)H_R} φ_c⟩`.

use crate::combinatorics::{enumerate_pairings, simplex_quadrature, Pairing};
use crate::linalg::{c, op_norm, zeros, CMat, CVec, HermitianSpectrum};
use crate::system_model::{CouplingDecomposition, DiscretizedReservoir, SmallSystem};
use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::HashMap;
use thiserror::Error;

pub const DENSE_LIMIT: usize = 2000;
const TAYLOR_TERMS: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FockError {
    #[error("Taylor step failed to converge (achieved residual {residual:.3e})")]
    StepControl { residual: f64 },
    #[error(
        "horizon {horizon:.3} exceeds the recurrence guard {limit:.3} of the grid; \
         refine the grid or use the Friedrichs-sector reduction"
    )]
    HorizonBudget { horizon: f64, limit: f64 },
    #[error("times must be ordered: {0:?}")]
    Unordered(Vec<f64>),
    #[error("expected {expected} operators for {times} times")]
    ChainLength { expected: usize, times: usize },
    #[error("max_order {0} exceeds the supported 3 pairs")]
    OrderTooHigh(usize),
    #[error(
        "simplex quadrature cannot resolve total phase {phase:.2} with {points} points per axis; \
         use at least {required}"
    )]
    PhaseResolution { phase: f64, points: usize, required: usize },
    #[error("occupation cutoff too large: {0} states")]
    BasisTooLarge(usize),
    #[error("one-particle vector has length {got}, expected {expected} modes")]
    ModeMismatch { got: usize, expected: usize },
}

/// Occupation-number basis with `Σ n_i ≤ n_max`, ordered by total number then lexicographically.
#[derive(Clone, Debug)]
pub struct FockBasis {
    pub modes: usize,
    pub n_max: usize,
    pub states: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
}

pub fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

impl FockBasis {
    pub fn new(modes: usize, n_max: usize) -> Result<Self, FockError> {
        let expected = Self::expected_len(modes, n_max);
        if expected > 5_000_000 {
            return Err(FockError::BasisTooLarge(expected));
        }
        let mut states = Vec::with_capacity(expected);
        for total in 0..=n_max {
            let mut occ = vec![0u8; modes];
            fill(&mut occ, 0, total, &mut states);
        }
        let index = states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self { modes, n_max, states, index })
    }

    /// `Σ_{k ≤ n_max} C(N + k − 1, k)`.
    pub fn expected_len(modes: usize, n_max: usize) -> usize {
        if modes == 0 {
            return 1;
        }
        (0..=n_max).map(|k| binomial(modes + k - 1, k)).sum()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, occ: &[u8]) -> Option<usize> {
        self.index.get(occ).copied()
    }

    pub fn number(&self, i: usize) -> usize {
        self.states[i].iter().map(|&n| n as usize).sum()
    }

    /// Index of `a_i† |state⟩` with its bosonic factor `√(n_i + 1)`.
    pub fn raise(&self, state: usize, mode: usize) -> Option<(usize, f64)> {
        let mut occ = self.states[state].clone();
        let n = occ[mode] as f64;
        occ[mode] += 1;
        self.index_of(&occ).map(|j| (j, (n + 1.0).sqrt()))
    }
}

fn fill(occ: &mut Vec<u8>, pos: usize, remaining: usize, out: &mut Vec<Vec<u8>>) {
    if pos == occ.len() {
        if remaining == 0 {
            out.push(occ.clone());
        }
        return;
    }
    for n in (0..=remaining).rev() {
        occ[pos] = n as u8;
        fill(occ, pos + 1, remaining - n, out);
    }
    occ[pos] = 0;
}

/// Compressed sparse rows.
#[derive(Clone, Debug)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<Complex64>,
}

impl Csr {
    pub fn from_triplets(n: usize, mut trip: Vec<(usize, usize, Complex64)>) -> Self {
        trip.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals: Vec<Complex64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, col, v) in trip {
            if last == Some((r, col)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            cols.push(col);
            vals.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, col));
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn matvec(&self, x: &CVec) -> CVec {
        CVec::from_fn(self.n, |r, _| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| self.vals[k] * x[self.cols[k]]).sum()
        })
    }

    pub fn to_dense(&self) -> CMat {
        let mut m = zeros(self.n, self.n);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[(r, self.cols[k])] += self.vals[k];
            }
        }
        m
    }

    /// Largest absolute row sum, an upper bound on the operator norm of a Hermitian matrix.
    pub fn row_sum_bound(&self) -> f64 {
        (0..self.n)
            .map(|r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| self.vals[k].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub enum Storage {
    Dense(CMat),
    Sparse(Csr),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorKind {
    Free,
    Full,
    Interaction,
}

#[derive(Clone, Debug)]
pub struct FockOperator {
    pub dim: usize,
    pub storage: Storage,
    pub lambda: f64,
    pub kind: OperatorKind,
}

impl FockOperator {
    fn from_triplets(dim: usize, trip: Vec<(usize, usize, Complex64)>, lambda: f64, kind: OperatorKind) -> Self {
        let csr = Csr::from_triplets(dim, trip);
        let storage = if dim <= DENSE_LIMIT { Storage::Dense(csr.to_dense()) } else { Storage::Sparse(csr) };
        Self { dim, storage, lambda, kind }
    }

    pub fn matvec(&self, x: &CVec) -> CVec {
        match &self.storage {
            Storage::Dense(m) => m * x,
            Storage::Sparse(s) => s.matvec(x),
        }
    }

    pub fn to_dense(&self) -> CMat {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(s) => s.to_dense(),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    pub fn norm_bound(&self) -> f64 {
        match &self.storage {
            Storage::Dense(m) => (0..m.nrows()).map(|r| m.row(r).iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max),
            Storage::Sparse(s) => s.row_sum_bound(),
        }
    }
}

fn free_triplets(sys: &SmallSystem, disc: &DiscretizedReservoir, basis: &FockBasis) -> Vec<(usize, usize, Complex64)> {
    let d = sys.dim;
    let mut trip = Vec::new();
    for (s, occ) in basis.states.iter().enumerate() {
        let e: f64 = occ.iter().zip(&disc.modes).map(|(&n, m)| n as f64 * m.frequency).sum();
        for k in 0..d {
            for l in 0..d {
                let mut v = sys.hamiltonian[(k, l)];
                if k == l {
                    v += e;
                }
                if v != c(0.0, 0.0) {
                    trip.push((s * d + k, s * d + l, v));
                }
            }
        }
    }
    trip
}

fn interaction_triplets(disc: &DiscretizedReservoir, basis: &FockBasis, scale: f64) -> Vec<(usize, usize, Complex64)> {
    let d = disc.system_dim;
    let mut trip = Vec::new();
    for s in 0..basis.len() {
        for (i, v) in disc.coupling.iter().enumerate() {
            if let Some((t, amp)) = basis.raise(s, i) {
                for k in 0..d {
                    for l in 0..d {
                        let z = v[(k, l)] * (amp * scale);
                        if z != c(0.0, 0.0) {
                            trip.push((t * d + k, s * d + l, z));
                            trip.push((s * d + l, t * d + k, z.conj()));
                        }
                    }
                }
            }
        }
    }
    trip
}

/// `H_λ = K ⊗ 1 + dΓ(H_R) + λ(a(V) + a*(V))`; warns when the cutoff forbids any emission.
pub fn build_hamiltonian(
    sys: &SmallSystem,
    disc: &DiscretizedReservoir,
    basis: &FockBasis,
    lambda: f64,
) -> (FockOperator, Vec<String>) {
    let d = sys.dim;
    let mut warnings = Vec::new();
    if basis.n_max == 0 && lambda != 0.0 {
        warnings.push("n_max = 0 truncates away every emission from the vacuum".to_string());
    }
    let mut trip = free_triplets(sys, disc, basis);
    if lambda != 0.0 {
        trip.extend(interaction_triplets(disc, basis, lambda));
    }
    let kind = if lambda == 0.0 { OperatorKind::Free } else { OperatorKind::Full };
    (FockOperator::from_triplets(d * basis.len(), trip, lambda, kind), warnings)
}

/// `a(V) + a*(V)` alone.
pub fn build_interaction(disc: &DiscretizedReservoir, basis: &FockBasis) -> FockOperator {
    let d = disc.system_dim;
    FockOperator::from_triplets(d * basis.len(), interaction_triplets(disc, basis, 1.0), 1.0, OperatorKind::Interaction)
}

/// `e^{-itH}` evaluator: cached eigendecomposition for dense operators,
/// Taylor stepping for sparse ones.
pub enum Propagator {
    Dense(HermitianSpectrum),
    Sparse { op: Csr, bound: f64, max_frequency: f64 },
}

impl Propagator {
    pub fn new(h: &FockOperator) -> Self {
        match &h.storage {
            Storage::Dense(m) => Propagator::Dense(HermitianSpectrum::new(m)),
            Storage::Sparse(s) => Propagator::Sparse { op: s.clone(), bound: s.row_sum_bound(), max_frequency: 0.0 },
        }
    }

    /// Also enforce `max|x| · step ≤ 0.1` on the Taylor step.
    pub fn with_frequency_limit(mut self, max_frequency: f64) -> Self {
        if let Propagator::Sparse { max_frequency: m, .. } = &mut self {
            *m = max_frequency;
        }
        self
    }

    pub fn apply(&self, t: f64, psi: &CVec) -> Result<CVec, FockError> {
        match self {
            Propagator::Dense(spec) => Ok(spec.apply(t, psi)),
            Propagator::Sparse { op, bound, max_frequency } => {
                if t == 0.0 {
                    return Ok(psi.clone());
                }
                let mut step = 1.0 / bound.max(1e-300);
                if *max_frequency > 0.0 {
                    step = step.min(0.1 / max_frequency);
                }
                let steps = (t.abs() / step).ceil().max(1.0) as usize;
                let tau = t / steps as f64;
                let mut out = psi.clone();
                for _ in 0..steps {
                    out = taylor_step(op, tau, &out)?;
                }
                Ok(out)
            }
        }
    }
}

fn taylor_step(op: &Csr, tau: f64, psi: &CVec) -> Result<CVec, FockError> {
    let mut term = psi.clone();
    let mut acc = psi.clone();
    let scale = psi.norm().max(1e-300);
    for k in 1..=TAYLOR_TERMS {
        term = op.matvec(&term) * c(0.0, -tau / k as f64);
        acc += &term;
        if term.norm() <= 1e-16 * scale {
            return Ok(acc);
        }
    }
    Err(FockError::StepControl { residual: term.norm() / scale })
}

pub fn propagate(h: &FockOperator, t: f64, psi: &CVec) -> Result<CVec, FockError> {
    Propagator::new(h).apply(t, psi)
}

/// Truncated Fock simulation of one model at one coupling strength.
pub struct FockSimulation {
    pub sys: SmallSystem,
    pub basis: FockBasis,
    pub lambda: f64,
    pub hamiltonian: FockOperator,
    energies: Vec<f64>,
    propagator: Propagator,
    recurrence_limit: f64,
}

impl FockSimulation {
    pub fn new(sys: &SmallSystem, disc: &DiscretizedReservoir, n_max: usize, lambda: f64) -> Result<Self, FockError> {
        let basis = FockBasis::new(disc.len(), n_max)?;
        let (hamiltonian, _) = build_hamiltonian(sys, disc, &basis, lambda);
        let energies = basis
            .states
            .iter()
            .map(|occ| occ.iter().zip(&disc.modes).map(|(&n, m)| n as f64 * m.frequency).sum())
            .collect();
        let max_x = disc.modes.iter().map(|m| m.frequency.abs()).fold(0.0, f64::max);
        let propagator = Propagator::new(&hamiltonian).with_frequency_limit(max_x);
        Ok(Self {
            sys: sys.clone(),
            basis,
            lambda,
            hamiltonian,
            energies,
            propagator,
            recurrence_limit: 0.5 * disc.recurrence_time(),
        })
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim
    }

    pub fn recurrence_limit(&self) -> f64 {
        self.recurrence_limit
    }

    pub fn check_horizon(&self, horizon: f64) -> Result<(), FockError> {
        if horizon.abs() > self.recurrence_limit {
            return Err(FockError::HorizonBudget { horizon: horizon.abs(), limit: self.recurrence_limit });
        }
        Ok(())
    }

    /// `e^{isH₀} ψ`.
    pub fn free(&self, s: f64, psi: &CVec) -> CVec {
        let d = self.sys.dim;
        let uk = self.sys.free_propagator(-s);
        let mut out = CVec::zeros(psi.len());
        for (n, e) in self.energies.iter().enumerate() {
            let block = psi.rows(n * d, d);
            let phase = Complex64::from_polar(1.0, s * e);
            out.rows_mut(n * d, d).copy_from(&(&uk * block * phase));
        }
        out
    }

    /// `T_λ(t, t₀) ψ` in physical (unscaled) time.
    pub fn interaction_step(&self, t: f64, t0: f64, psi: &CVec) -> Result<CVec, FockError> {
        let x = self.free(-t0, psi);
        let x = self.propagator.apply(t - t0, &x)?;
        Ok(self.free(t, &x))
    }

    /// `S ⊗ 1`.
    pub fn apply_system(&self, s: &CMat, psi: &CVec) -> CVec {
        let d = self.sys.dim;
        let mut out = CVec::zeros(psi.len());
        for n in 0..self.basis.len() {
            out.rows_mut(n * d, d).copy_from(&(s * psi.rows(n * d, d)));
        }
        out
    }

    pub fn embed_vacuum(&self, k: usize) -> CVec {
        let mut v = CVec::zeros(self.dim());
        v[k] = c(1.0, 0.0);
        v
    }

    /// `e_k ⊗ a*(f) Ω` for a mode-space vector `f`.
    pub fn embed_one_particle(&self, k: usize, f: &CVec) -> Result<CVec, FockError> {
        if f.len() != self.basis.modes {
            return Err(FockError::ModeMismatch { got: f.len(), expected: self.basis.modes });
        }
        let d = self.sys.dim;
        let mut v = CVec::zeros(self.dim());
        for i in 0..self.basis.modes {
            if let Some((s, _)) = self.basis.raise(0, i) {
                v[s * d + k] = f[i];
            }
        }
        Ok(v)
    }

    /// Amplitudes of `ψ` on `𝒦 ⊗ a*(f)Ω`: `(1 ⊗ ⟨a*(f)Ω|) ψ`.
    pub fn project_one_particle(&self, f: &CVec, psi: &CVec) -> CVec {
        let d = self.sys.dim;
        let mut out = CVec::zeros(d);
        for i in 0..self.basis.modes {
            if let Some((s, _)) = self.basis.raise(0, i) {
                for k in 0..d {
                    out[k] += f[i].conj() * psi[s * d + k];
                }
            }
        }
        out
    }

    /// `(1 ⊗ ⟨Ω|) ψ`.
    pub fn project_vacuum(&self, psi: &CVec) -> CVec {
        psi.rows(0, self.sys.dim).into_owned()
    }

    /// `I* T_λ(t, t₀) I` in physical time.
    pub fn compressed(&self, t: f64, t0: f64) -> Result<CMat, FockError> {
        self.check_horizon(t - t0)?;
        let d = self.sys.dim;
        let mut out = zeros(d, d);
        for l in 0..d {
            let psi = self.interaction_step(t, t0, &self.embed_vacuum(l))?;
            out.set_column(l, &self.project_vacuum(&psi));
        }
        Ok(out)
    }

    /// `I* T(t_ℓ+1, t_ℓ) S_ℓ ⋯ S₁ T(t₁, t₀) I` in physical time with `times = [t₀, …, t]`.
    pub fn chain(&self, ops: &[CMat], times: &[f64]) -> Result<CMat, FockError> {
        if times.len() != ops.len() + 2 {
            return Err(FockError::ChainLength { expected: times.len().saturating_sub(2), times: times.len() });
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(FockError::Unordered(times.to_vec()));
        }
        self.check_horizon(times[times.len() - 1] - times[0])?;
        let d = self.sys.dim;
        let mut out = zeros(d, d);
        for l in 0..d {
            let mut psi = self.interaction_step(times[1], times[0], &self.embed_vacuum(l))?;
            for (i, s) in ops.iter().enumerate() {
                psi = self.apply_system(s, &psi);
                psi = self.interaction_step(times[i + 2], times[i + 1], &psi)?;
            }
            out.set_column(l, &self.project_vacuum(&psi));
        }
        Ok(out)
    }
}

/// `I* T_λ(λ⁻²t, λ⁻²t₀) I` on the full truncated Fock space.
pub fn reduced_dynamics(
    sys: &SmallSystem,
    disc: &DiscretizedReservoir,
    lambda: f64,
    t: f64,
    t0: f64,
    n_max: usize,
) -> Result<CMat, FockError> {
    if lambda == 0.0 || t == t0 {
        return Ok(CMat::identity(sys.dim, sys.dim));
    }
    let sim = FockSimulation::new(sys, disc, n_max, lambda)?;
    let s = 1.0 / (lambda * lambda);
    sim.compressed(s * t, s * t0)
}

/// `K ⊕ (K + H_R)` with `λV` couplings on `𝒦 ⊕ (𝒦 ⊗ grid)`.
pub struct FriedrichsSector {
    pub dim: usize,
    pub matrix: CMat,
    pub lambda: f64,
    spectrum: HermitianSpectrum,
    sys: SmallSystem,
    recurrence_limit: f64,
}

impl FriedrichsSector {
    pub fn new(sys: &SmallSystem, disc: &DiscretizedReservoir, lambda: f64) -> Self {
        let d = sys.dim;
        let m = disc.len();
        let dim = d * (1 + m);
        let mut h = zeros(dim, dim);
        h.view_mut((0, 0), (d, d)).copy_from(&sys.hamiltonian);
        for (i, (mode, v)) in disc.modes.iter().zip(&disc.coupling).enumerate() {
            let o = d * (1 + i);
            let mut block = sys.hamiltonian.clone();
            for k in 0..d {
                block[(k, k)] += mode.frequency;
            }
            h.view_mut((o, o), (d, d)).copy_from(&block);
            h.view_mut((o, 0), (d, d)).copy_from(&(v * c(lambda, 0.0)));
            h.view_mut((0, o), (d, d)).copy_from(&(v.adjoint() * c(lambda, 0.0)));
        }
        let spectrum = HermitianSpectrum::new(&h);
        Self { dim, matrix: h, lambda, spectrum, sys: sys.clone(), recurrence_limit: 0.5 * disc.recurrence_time() }
    }

    /// `G_λ(t, t₀) = e^{iλ⁻²tK} I* e^{-iλ⁻²(t−t₀)H̃} I e^{-iλ⁻²t₀K}`.
    pub fn reduced(&self, t: f64, t0: f64) -> Result<CMat, FockError> {
        let d = self.sys.dim;
        let s = 1.0 / (self.lambda * self.lambda);
        let horizon = s * (t - t0);
        if horizon.abs() > self.recurrence_limit {
            return Err(FockError::HorizonBudget { horizon: horizon.abs(), limit: self.recurrence_limit });
        }
        let u = self.spectrum.propagator(horizon);
        let block = u.view((0, 0), (d, d)).into_owned();
        Ok(self.sys.free_propagator(-s * t) * block * self.sys.free_propagator(s * t0))
    }
}

pub fn friedrichs_reduced(
    sys: &SmallSystem,
    disc: &DiscretizedReservoir,
    lambda: f64,
    t: f64,
    t0: f64,
) -> Result<CMat, FockError> {
    if lambda == 0.0 {
        return Ok(CMat::identity(sys.dim, sys.dim));
    }
    FriedrichsSector::new(sys, disc, lambda).reduced(t, t0)
}

/// Partial Dyson/Wick sum with the per-order uniform bound.
#[derive(Clone, Debug)]
pub struct DysonWick {
    /// `C_0, …, C_max`.
    pub terms: Vec<CMat>,
    /// `‖D‖^{2n} (t−t₀)^n ‖h‖^n / (2^n n!)` with the finite-horizon `‖h‖₁`.
    pub bounds: Vec<f64>,
    pub sum: CMat,
    /// Bound on `Σ_{n > max_order} ‖C_n‖`.
    pub tail_bound: f64,
    pub h_norm: f64,
}

/// Sum of the uniform bounds from order `from` on.
pub fn wick_tail_bound(x: f64, from: usize) -> f64 {
    // Σ_{n ≥ from} x^n / n!
    let mut term = 1.0;
    for n in 1..=from {
        term *= x / n as f64;
    }
    let mut acc = 0.0;
    let mut n = from;
    while term > 1e-300 && n < from + 200 {
        acc += term;
        n += 1;
        term *= x / n as f64;
        if term < 1e-18 * acc {
            break;
        }
    }
    acc
}

struct VertexTables {
    /// `e^{isK} D_j e^{-isK}` and `e^{isK} D_j* e^{-isK}` per node slot and term.
    create: Vec<Vec<CMat>>,
    annihilate: Vec<Vec<CMat>>,
}

const NODE_CHUNK: usize = 256;

pub fn dyson_wick_sum(
    sys: &SmallSystem,
    decomp: &CouplingDecomposition,
    lambda: f64,
    t: f64,
    t0: f64,
    max_order: usize,
    points_per_axis: usize,
) -> Result<DysonWick, FockError> {
    if max_order > 3 {
        return Err(FockError::OrderTooHigh(max_order));
    }
    let d = sys.dim;
    let scale = 1.0 / (lambda * lambda);
    let horizon = scale * (t - t0);
    let e = sys.energies();
    let x_max = decomp
        .terms
        .iter()
        .flat_map(|_| decomp.reservoir().segments().flat_map(|s| [s.interval.0.abs(), s.interval.1.abs()]))
        .fold(0.0, f64::max);
    let omega_max = x_max + (e.last().unwrap() - e.first().unwrap());
    let phase = horizon * omega_max;
    if max_order > 0 && phase > points_per_axis as f64 {
        return Err(FockError::PhaseResolution { phase, points: points_per_axis, required: phase.ceil() as usize });
    }
    let h_norm = decomp.h_l1(horizon);
    let dnorm = decomp.max_small_norm();
    let x = dnorm * dnorm * (t - t0) * h_norm / 2.0;
    let mut terms = vec![CMat::identity(d, d)];
    let mut bounds = vec![1.0];
    let jn = decomp.len();
    for n in 1..=max_order {
        let pairings = enumerate_pairings(n).expect("guarded above");
        let rule = simplex_quadrature(2 * n, t0, t, points_per_axis).expect("interval checked");
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        let prefactor = sign * scale.powi(n as i32);
        let cn = if jn == 0 || t == t0 {
            zeros(d, d)
        } else {
            // Fixed chunks summed in index order keep the result independent of the thread count.
            let chunks: Vec<CMat> = rule
                .nodes
                .par_chunks(NODE_CHUNK)
                .zip(rule.weights.par_chunks(NODE_CHUNK))
                .map(|(nodes, weights)| {
                    let mut acc = zeros(d, d);
                    for (nodes, w) in nodes.iter().zip(weights) {
                        let tables = vertex_tables(sys, decomp, nodes, scale);
                        for p in &pairings {
                            acc += wick_term(decomp, &tables, p, nodes, scale) * c(*w, 0.0);
                        }
                    }
                    acc
                })
                .collect();
            chunks.iter().fold(zeros(d, d), |a, b| a + b)
                * c(prefactor, 0.0)
        };
        terms.push(cn);
        bounds.push(x.powi(n as i32) / (1..=n).map(|k| k as f64).product::<f64>());
    }
    let sum = terms.iter().fold(zeros(d, d), |a, b| a + b);
    Ok(DysonWick { terms, bounds, sum, tail_bound: wick_tail_bound(x, max_order + 1), h_norm })
}

fn vertex_tables(sys: &SmallSystem, decomp: &CouplingDecomposition, nodes: &[f64], scale: f64) -> VertexTables {
    let mut create = Vec::with_capacity(nodes.len());
    let mut annihilate = Vec::with_capacity(nodes.len());
    for &ti in nodes {
        let s = scale * ti;
        let fwd = sys.free_propagator(-s);
        let back = sys.free_propagator(s);
        create.push(decomp.terms.iter().map(|term| &fwd * &term.small * &back).collect());
        annihilate.push(decomp.terms.iter().map(|term| &fwd * term.small.adjoint() * &back).collect());
    }
    VertexTables { create, annihilate }
}

fn wick_term(decomp: &CouplingDecomposition, tables: &VertexTables, p: &Pairing, nodes: &[f64], scale: f64) -> CMat {
    let n = p.n();
    let slots = 2 * n;
    let jn = decomp.len();
    // For each slot: its pair index and whether it creates.
    let mut role = vec![(0usize, true); slots];
    for (q, (a, b)) in p.pairs().enumerate() {
        role[a] = (q, true);
        role[b] = (q, false);
    }
    let pairs: Vec<(usize, usize)> = p.pairs().collect();
    let corr: Vec<Vec<Complex64>> = pairs
        .iter()
        .map(|&(cs, an)| {
            decomp.correlation_matrix(scale * (nodes[an] - nodes[cs]))
        })
        .collect();
    let d = tables.create[0][0].nrows();
    // Σ_{ja} ⟨φ_ja|…φ_jc⟩ (annihilation vertex ja), indexed by pair and jc.
    let dressed: Vec<Vec<CMat>> = pairs
        .iter()
        .enumerate()
        .map(|(q, &(_, an))| {
            (0..jn)
                .map(|jc| {
                    let mut m = zeros(d, d);
                    for ja in 0..jn {
                        let w = corr[q][ja * jn + jc];
                        if w.norm() > 0.0 {
                            m += &tables.annihilate[an][ja] * w;
                        }
                    }
                    m
                })
                .collect()
        })
        .collect();
    let mut acc = zeros(d, d);
    let mut js = vec![0usize; slots];
    wick_walk(tables, &role, &pairs, &dressed, jn, 0, &mut js, CMat::identity(d, d), &mut acc);
    acc
}

/// Depth-first sum over creation indices, sharing prefix products.
#[allow(clippy::too_many_arguments)]
fn wick_walk(
    tables: &VertexTables,
    role: &[(usize, bool)],
    pairs: &[(usize, usize)],
    dressed: &[Vec<CMat>],
    jn: usize,
    slot: usize,
    js: &mut [usize],
    prod: CMat,
    acc: &mut CMat,
) {
    if slot == role.len() {
        *acc += prod;
        return;
    }
    let (q, creates) = role[slot];
    if !creates {
        let m = &dressed[q][js[pairs[q].0]];
        wick_walk(tables, role, pairs, dressed, jn, slot + 1, js, m * &prod, acc);
        return;
    }
    for j in 0..jn {
        js[slot] = j;
        wick_walk(tables, role, pairs, dressed, jn, slot + 1, js, &tables.create[slot][j] * &prod, acc);
    }
}

/// `e^{-i(t−t_ℓ)Υ} S_ℓ ⋯ S₁ e^{-i(t₁−t₀)Υ}` for `times = [t₀, t₁, …, t_ℓ, t]`.
pub fn correlation_limit(upsilon: &CMat, ops: &[CMat], times: &[f64]) -> CMat {
    let d = upsilon.nrows();
    let step = |dt: f64| crate::linalg::expm(&(upsilon * c(0.0, -dt)));
    let mut out = step(times[1] - times[0]);
    for (i, s) in ops.iter().enumerate() {
        out = step(times[i + 2] - times[i + 1]) * s * out;
    }
    debug_assert_eq!(out.nrows(), d);
    out
}

/// `I* T_λ(λ⁻²t, λ⁻²t_ℓ) S_ℓ ⋯ S₁ T_λ(λ⁻²t₁, λ⁻²t₀) I` for `times = [t₀, t₁, …, t_ℓ, t]`.
pub fn correlation_chain(
    sys: &SmallSystem,
    disc: &DiscretizedReservoir,
    lambda: f64,
    ops: &[CMat],
    times: &[f64],
    n_max: usize,
) -> Result<CMat, FockError> {
    let sim = FockSimulation::new(sys, disc, n_max, lambda)?;
    let s = 1.0 / (lambda * lambda);
    let scaled: Vec<f64> = times.iter().map(|t| t * s).collect();
    sim.chain(ops, &scaled)
}

/// `‖I*T(t,t')(S⊗1)T(t',t₀)I − I*T(t,t')I · S · I*T(t',t₀)I‖` at rescaled times.
pub fn factorization_defect(sim: &FockSimulation, s: &CMat, t: f64, tp: f64, t0: f64) -> Result<f64, FockError> {
    let scale = 1.0 / (sim.lambda * sim.lambda);
    let (t, tp, t0) = (t * scale, tp * scale, t0 * scale);
    let full = sim.chain(std::slice::from_ref(s), &[t0, tp, t])?;
    let fact = sim.compressed(t, tp)? * s * sim.compressed(tp, t0)?;
    Ok(op_norm(&(full - fact)))
}

/// Outcome of comparing the resummed expansion with direct propagation.
#[derive(Clone, Debug)]
pub struct ResummationCheck {
    /// `(label, direct, resummed)` for each compared block.
    pub elements: Vec<(String, CMat, CMat)>,
    pub residual: f64,
    pub tail_bound: f64,
}

/// In/out content of a resummation matrix element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quanta {
    Vacuum,
    One,
}

/// Resummed expansion of `T_λ(t, t₀)` in physical time, truncated at `max_m`
/// explicit vertices, versus direct propagation.
///
/// Chains are evaluated on the `n_max` space; direct propagation carries the
/// in/out quantum on top of that (`n_max + 1`). Matrix elements are taken
/// between `𝒦 ⊗ Ω` and `𝒦 ⊗ a*(f)Ω`, `𝒦 ⊗ a*(f')Ω`.
#[allow(clippy::too_many_arguments)]
pub fn resummation_check(
    sys: &SmallSystem,
    decomp: &CouplingDecomposition,
    disc: &DiscretizedReservoir,
    lambda: f64,
    t: f64,
    t0: f64,
    max_m: usize,
    n_max: usize,
    f_in: &CVec,
    f_out: &CVec,
    points_per_axis: usize,
) -> Result<ResummationCheck, FockError> {
    let d = sys.dim;
    let chain_sim = FockSimulation::new(sys, disc, n_max, lambda)?;
    let direct_sim = FockSimulation::new(sys, disc, n_max + 1, lambda)?;
    direct_sim.check_horizon(t - t0)?;
    let freqs = disc.frequencies();
    // Σ_j D_j ⟨f'| e^{isH_R} φ_j⟩ and Σ_j D_j* ⟨e^{isH_R} φ_j | f⟩, in the interaction picture.
    let emit = |s: f64| {
        let mut acc = zeros(d, d);
        for term in &decomp.terms {
            let amp: Complex64 =
                (0..freqs.len()).map(|i| f_out[i].conj() * term.phi[i] * Complex64::from_polar(1.0, s * freqs[i])).sum();
            acc += &term.small * amp;
        }
        sys.free_propagator(-s) * acc * sys.free_propagator(s)
    };
    let absorb = |s: f64| {
        let mut acc = zeros(d, d);
        for term in &decomp.terms {
            let amp: Complex64 =
                (0..freqs.len()).map(|i| (term.phi[i] * Complex64::from_polar(1.0, s * freqs[i])).conj() * f_in[i]).sum();
            acc += term.small.adjoint() * amp;
        }
        sys.free_propagator(-s) * acc * sys.free_propagator(s)
    };
    let chain = |ops: &[CMat], times: &[f64]| chain_sim.chain(ops, times);
    let minus_i_lambda = c(0.0, -lambda);

    let direct = |inq: Quanta, outq: Quanta| -> Result<CMat, FockError> {
        let mut out = zeros(d, d);
        for l in 0..d {
            let psi = match inq {
                Quanta::Vacuum => direct_sim.embed_vacuum(l),
                Quanta::One => direct_sim.embed_one_particle(l, f_in)?,
            };
            let psi = direct_sim.interaction_step(t, t0, &psi)?;
            let col = match outq {
                Quanta::Vacuum => direct_sim.project_vacuum(&psi),
                Quanta::One => direct_sim.project_one_particle(f_out, &psi),
            };
            out.set_column(l, &col);
        }
        Ok(out)
    };
    let overlap: Complex64 = f_out.iter().zip(f_in.iter()).map(|(a, b)| a.conj() * b).sum();
    let r1 = simplex_quadrature(1, t0, t, points_per_axis).expect("interval");
    let r2 = simplex_quadrature(2, t0, t, points_per_axis).expect("interval");

    let resummed = |inq: Quanta, outq: Quanta| -> Result<CMat, FockError> {
        let mut acc = zeros(d, d);
        if inq == outq {
            let m0 = chain(&[], &[t0, t])?;
            acc += if inq == Quanta::One { m0 * overlap } else { m0 };
        }
        if max_m >= 1 {
            let ops: Option<fn(f64) -> bool> = match (inq, outq) {
                (Quanta::Vacuum, Quanta::One) => Some(|_| true),
                (Quanta::One, Quanta::Vacuum) => Some(|_| false),
                _ => None,
            };
            if let Some(is_emit) = ops {
                for (nodes, w) in r1.nodes.iter().zip(&r1.weights) {
                    let s = nodes[0];
                    let v = if is_emit(s) { emit(s) } else { absorb(s) };
                    acc += chain(&[v], &[t0, s, t])? * (minus_i_lambda * *w);
                }
            }
        }
        if max_m >= 2 && inq == Quanta::One && outq == Quanta::One {
            for (nodes, w) in r2.nodes.iter().zip(&r2.weights) {
                let (s1, s2) = (nodes[0], nodes[1]);
                let a = chain(&[absorb(s1), emit(s2)], &[t0, s1, s2, t])?;
                let b = chain(&[emit(s1), absorb(s2)], &[t0, s1, s2, t])?;
                acc += (a + b) * (minus_i_lambda * minus_i_lambda * *w);
            }
        }
        Ok(acc)
    };

    let blocks = [
        ("vacuum->vacuum", Quanta::Vacuum, Quanta::Vacuum),
        ("vacuum->one", Quanta::Vacuum, Quanta::One),
        ("one->vacuum", Quanta::One, Quanta::Vacuum),
        ("one->one", Quanta::One, Quanta::One),
    ];
    let mut elements = Vec::new();
    let mut residual: f64 = 0.0;
    for (label, i, o) in blocks {
        let lhs = direct(i, o)?;
        let rhs = resummed(i, o)?;
        residual = residual.max(op_norm(&(&lhs - &rhs)));
        elements.push((label.to_string(), lhs, rhs));
    }
    let dnorm = decomp.max_small_norm();
    let x = dnorm * dnorm * lambda * lambda * (t - t0) * decomp.h_l1(t - t0) / 2.0;
    let norms = f_in.norm().max(1.0) * f_out.norm().max(1.0);
    Ok(ResummationCheck { elements, residual, tail_bound: norms * wick_tail_bound(x, max_m + 1) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diag_real, eye, fro, hermiticity_defect};
    use crate::system_model::{
        decompose_coupling, discretize_reservoir, spectral_decompose, Profile, QuadratureRule, ReservoirModel,
        Segment, SegmentLabel,
    };
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn sigma_x() -> CMat {
        CMat::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)])
    }

    fn two_level(n: usize) -> (SmallSystem, ReservoirModel, DiscretizedReservoir) {
        let sys = spectral_decompose(&diag_real(&[0.0, 1.0]), 1e-9).unwrap();
        let chans = [-1.0, 0.0, 1.0]
            .iter()
            .map(|&w| Segment {
                label: SegmentLabel::Bohr(w),
                interval: (w - 0.5, w + 0.5),
                multiplicity: 1,
                profile: Profile::Flat { amplitude: 0.2 },
                coupling: sigma_x(),
            })
            .collect();
        let res = ReservoirModel::new(&sys, chans, vec![]).unwrap();
        let disc = discretize_reservoir(&res, n, QuadratureRule::Midpoint).unwrap();
        (sys, res, disc)
    }

    fn random_state(dim: usize, seed: u64) -> CVec {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v = CVec::from_fn(dim, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let n = v.norm();
        v / c(n, 0.0)
    }

    #[test]
    fn basis_sizes_and_round_trip() {
        for (modes, n_max) in [(1, 1), (2, 2), (5, 3), (12, 2)] {
            let b = FockBasis::new(modes, n_max).unwrap();
            assert_eq!(b.len(), FockBasis::expected_len(modes, n_max));
            for (i, s) in b.states.iter().enumerate() {
                assert_eq!(b.index_of(s), Some(i));
            }
        }
        assert_eq!(FockBasis::new(12, 2).unwrap().len(), 91);
    }

    #[test]
    fn zero_coupling_hamiltonian_is_free() {
        let (sys, _, disc) = two_level(3);
        let basis = FockBasis::new(disc.len(), 2).unwrap();
        let (h, _) = build_hamiltonian(&sys, &disc, &basis, 0.0);
        assert_eq!(h.kind, OperatorKind::Free);
        let m = h.to_dense();
        assert!(fro(&(&m - CMat::from_diagonal(&m.diagonal()))) == 0.0);
    }

    #[test]
    fn single_mode_block() {
        let sys = spectral_decompose(&zeros(1, 1), 1e-9).unwrap();
        let ch = Segment {
            label: SegmentLabel::Bohr(0.0),
            interval: (-1.0, 1.0),
            multiplicity: 1,
            profile: Profile::Flat { amplitude: 0.3 },
            coupling: eye(1),
        };
        let res = ReservoirModel::new(&sys, vec![ch], vec![]).unwrap();
        let mut disc = discretize_reservoir(&res, 2, QuadratureRule::Midpoint).unwrap();
        disc.modes.truncate(1);
        disc.coupling.truncate(1);
        let basis = FockBasis::new(1, 1).unwrap();
        let lambda = 0.7;
        let (h, _) = build_hamiltonian(&sys, &disc, &basis, lambda);
        let x1 = disc.modes[0].frequency;
        let w = disc.modes[0].weight;
        let expected =
            CMat::from_row_slice(2, 2, &[c(0.0, 0.0), c(lambda * 0.3 * w.sqrt(), 0.0), c(lambda * 0.3 * w.sqrt(), 0.0), c(x1, 0.0)]);
        assert!(fro(&(h.to_dense() - expected)) < 1e-15);
    }

    /// Independent construction: ⟨ψ|H|ψ⟩ by summing over occupation transitions explicitly.
    fn brute_expectation(sys: &SmallSystem, disc: &DiscretizedReservoir, basis: &FockBasis, lambda: f64, psi: &CVec) -> Complex64 {
        let d = sys.dim;
        let mut acc = c(0.0, 0.0);
        for (a, occ_a) in basis.states.iter().enumerate() {
            for (b, occ_b) in basis.states.iter().enumerate() {
                for k in 0..d {
                    for l in 0..d {
                        let mut m = c(0.0, 0.0);
                        if a == b {
                            m += sys.hamiltonian[(k, l)];
                            if k == l {
                                m += occ_a.iter().zip(&disc.modes).map(|(&n, md)| n as f64 * md.frequency).sum::<f64>();
                            }
                        }
                        let diff: Vec<i32> = occ_a.iter().zip(occ_b).map(|(&x, &y)| x as i32 - y as i32).collect();
                        let nonzero: Vec<usize> = (0..diff.len()).filter(|&i| diff[i] != 0).collect();
                        if nonzero.len() == 1 {
                            let i = nonzero[0];
                            if diff[i] == 1 {
                                m += disc.coupling[i][(k, l)] * (occ_a[i] as f64).sqrt() * lambda;
                            } else if diff[i] == -1 {
                                m += disc.coupling[i][(l, k)].conj() * (occ_b[i] as f64).sqrt() * lambda;
                            }
                        }
                        acc += psi[a * d + k].conj() * m * psi[b * d + l];
                    }
                }
            }
        }
        acc
    }

    #[test]
    fn hamiltonian_matches_brute_force_expectations() {
        let (sys, _, mut disc) = two_level(2);
        disc.modes.truncate(2);
        disc.coupling.truncate(2);
        let basis = FockBasis::new(2, 2).unwrap();
        let (h, _) = build_hamiltonian(&sys, &disc, &basis, 0.4);
        let m = h.to_dense();
        assert!(hermiticity_defect(&m) < 1e-12);
        for seed in 0..10 {
            let psi = random_state(h.dim, seed);
            let fast = (psi.adjoint() * &m * &psi)[(0, 0)];
            let slow = brute_expectation(&sys, &disc, &basis, 0.4, &psi);
            assert!((fast - slow).norm() < 1e-12);
        }
    }

    #[test]
    fn selection_rule_of_interaction() {
        let (sys, _, disc) = two_level(2);
        let basis = FockBasis::new(disc.len(), 2).unwrap();
        let hint = build_interaction(&disc, &basis).to_dense();
        let d = sys.dim;
        for r in 0..hint.nrows() {
            for col in 0..hint.ncols() {
                if hint[(r, col)].norm() > 0.0 {
                    let (a, b) = (&basis.states[r / d], &basis.states[col / d]);
                    let dist: i32 = a.iter().zip(b).map(|(&x, &y)| (x as i32 - y as i32).abs()).sum();
                    assert_eq!(dist, 1);
                }
            }
        }
    }

    #[test]
    fn propagate_matches_dense_eigensolver_and_taylor() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 50;
        let a = CMat::from_fn(n, n, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let h = (&a + a.adjoint()) * c(0.5, 0.0);
        let psi = random_state(n, 11);
        let oracle = HermitianSpectrum::new(&h).apply(1.0, &psi);
        let trip: Vec<_> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (i, j, h[(i, j)])).collect();
        let sparse = Propagator::Sparse { bound: Csr::from_triplets(n, trip.clone()).row_sum_bound(), op: Csr::from_triplets(n, trip), max_frequency: 0.0 };
        let out = sparse.apply(1.0, &psi).unwrap();
        assert!((out - &oracle).norm() < 1e-9);
        assert!((oracle.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reduced_dynamics_trivial_cases() {
        let (sys, _, disc) = two_level(3);
        assert!(fro(&(reduced_dynamics(&sys, &disc, 0.0, 1.0, 0.0, 2).unwrap() - eye(2))) == 0.0);
        assert!(fro(&(reduced_dynamics(&sys, &disc, 0.3, 0.5, 0.5, 2).unwrap() - eye(2))) == 0.0);
        let sim = FockSimulation::new(&sys, &disc, 2, 0.0).unwrap();
        assert!(fro(&(sim.compressed(3.0, 1.0).unwrap() - eye(2))) < 1e-12);
    }

    #[test]
    fn cocycle_property() {
        let (sys, _, disc) = two_level(3);
        let sim = FockSimulation::new(&sys, &disc, 2, 0.3).unwrap();
        let psi = random_state(sim.dim(), 5);
        let (t, s, r) = (2.0, 0.7, -0.4);
        let two = sim.interaction_step(t, s, &sim.interaction_step(s, r, &psi).unwrap()).unwrap();
        let one = sim.interaction_step(t, r, &psi).unwrap();
        assert!((two - one).norm() < 1e-9);
    }

    #[test]
    fn friedrichs_equals_single_excitation_fock() {
        let (sys, _, disc) = two_level(4);
        let g = friedrichs_reduced(&sys, &disc, 0.5, 0.5, 0.0).unwrap();
        let full1 = reduced_dynamics(&sys, &disc, 0.5, 0.5, 0.0, 1).unwrap();
        assert!(fro(&(&g - &full1)) < 1e-10);
        let full2 = reduced_dynamics(&sys, &disc, 0.3, 1.0, 0.0, 2).unwrap();
        let g2 = friedrichs_reduced(&sys, &disc, 0.3, 1.0, 0.0).unwrap();
        // The two-quantum correction is O(λ⁴ ‖V‖⁴ t²) at rescaled times.
        assert!(fro(&(full2 - g2)) < 0.05);
    }

    #[test]
    fn chain_with_identity_is_reduced_dynamics() {
        let (sys, _, disc) = two_level(3);
        let chain = correlation_chain(&sys, &disc, 0.5, &[eye(2)], &[0.0, 0.3, 0.6], 2).unwrap();
        let direct = reduced_dynamics(&sys, &disc, 0.5, 0.6, 0.0, 2).unwrap();
        assert!(fro(&(chain - direct)) < 1e-10);
        let sz = diag_real(&[1.0, -1.0]);
        let still = correlation_chain(&sys, &disc, 0.5, std::slice::from_ref(&sz), &[0.2, 0.2, 0.2], 2).unwrap();
        assert!(fro(&(still - &sz)) < 1e-12);
        assert!(correlation_chain(&sys, &disc, 0.5, &[sz], &[0.0, 0.5, 0.3], 2).is_err());
    }

    #[test]
    fn dyson_wick_orders_and_bounds() {
        let (sys, res, disc) = two_level(3);
        let dec = decompose_coupling(&sys, &res, &disc, None).unwrap();
        let dw = dyson_wick_sum(&sys, &dec, 0.5, 0.5, 0.0, 0, 6).unwrap();
        assert!(fro(&(dw.sum - eye(2))) == 0.0);
        let dw = dyson_wick_sum(&sys, &dec, 0.5, 0.5, 0.0, 2, 6).unwrap();
        for (cn, b) in dw.terms.iter().zip(&dw.bounds) {
            assert!(op_norm(cn) <= *b, "{} > {}", op_norm(cn), b);
        }
        let full = reduced_dynamics(&sys, &disc, 0.5, 0.5, 0.0, 2).unwrap();
        assert!(op_norm(&(full - &dw.sum)) <= dw.tail_bound);
    }

    #[test]
    fn first_order_dyson_matches_direct_double_integral() {
        // Oracle: C_1 = −λ⁻² ∫∫_{t1<t2} Σ_i e^{is2K}V_i* e^{-i(s2−s1)x_i} e^{-is2K} e^{is1K} V_i e^{-is1K}.
        let (sys, res, disc) = two_level(2);
        let dec = decompose_coupling(&sys, &res, &disc, None).unwrap();
        let (lambda, t) = (0.6, 0.4);
        let dw = dyson_wick_sum(&sys, &dec, lambda, t, 0.0, 1, 10).unwrap();
        let scale = 1.0 / (lambda * lambda);
        let rule = simplex_quadrature(2, 0.0, t, 10).unwrap();
        let mut acc = zeros(2, 2);
        for (nodes, w) in rule.nodes.iter().zip(&rule.weights) {
            let (s1, s2) = (scale * nodes[0], scale * nodes[1]);
            for (mode, v) in disc.modes.iter().zip(&disc.coupling) {
                let a = sys.free_propagator(-s2) * v.adjoint() * sys.free_propagator(s2);
                let b = sys.free_propagator(-s1) * v * sys.free_propagator(s1);
                acc += a * b * Complex64::from_polar(*w, -(s2 - s1) * mode.frequency);
            }
        }
        acc *= c(-scale, 0.0);
        assert!(fro(&(acc - &dw.terms[1])) < 1e-12);
    }

    #[test]
    fn resummation_is_exact_at_zero_coupling() {
        let (sys, res, disc) = two_level(2);
        let dec = decompose_coupling(&sys, &res, &disc, None).unwrap();
        let f = CVec::from_element(6, c(1.0 / 6f64.sqrt(), 0.0));
        let chk = resummation_check(&sys, &dec, &disc, 0.0, 1.0, 0.0, 2, 2, &f, &f, 8).unwrap();
        assert!(chk.residual < 1e-12, "{}", chk.residual);
    }

    #[test]
    fn resummation_within_tail_bound() {
        let (sys, res, disc) = two_level(2);
        let dec = decompose_coupling(&sys, &res, &disc, None).unwrap();
        let f_in = CVec::from_fn(6, |i, _| c(1.0 + i as f64, 0.5)).normalize();
        let f_out = CVec::from_fn(6, |i, _| c(0.3, 1.0 - 0.2 * i as f64)).normalize();
        for lambda in [0.1, 0.3] {
            let chk = resummation_check(&sys, &dec, &disc, lambda, 1.0, 0.0, 2, 2, &f_in, &f_out, 16).unwrap();
            assert!(chk.residual <= chk.tail_bound);
        }
    }
}
