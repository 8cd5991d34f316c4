//! Asymptotic-space objects: the time-bin unitary dilation of `e^{-itΥ}`,
//! the renormalizing Hamiltonian, the scaling isometries `J_λ`, the map `Θ`,
//! and the comparisons between the truncated Fock dynamics and the dilation.
//!
//! # Time-bin representation
//!
//! One-particle asymptotic vectors live on the relative-frequency axis `x`
//! with a fiber in `𝔥_ω`. The time representation is
//! `ĝ(τ) = (2π)^{-1/2} ∫ e^{-iτx} g(x) dx`, under which `e^{isZ_R}` shifts by
//! `+s` and `(2π)^{-1/2} e^{isZ_R}|1⟩` becomes `δ_s`. In the interaction picture
//! of `dΓ(Z_R)` the system therefore couples at time `r` to the field at `τ = r`
//! only, with coupling density `ν ⊗ a*(δ_r) + h.c.`.
//!
//! Bin `b` of width `dt` carries the normalized mode `dt^{-1/2} 1_{[b dt, (b+1) dt)}`.
//! Smearing `δ_r` over one bin turns `a*(δ_r) dr` into `√dt b†`, which is the
//! whole content of the `(2π)^{-1/2}` normalization: the bin generator is
//! `dt ReΥ ⊗ 1 + √dt (ν ⊗ b† + ν* ⊗ b)` and a field profile enters through its
//! bin amplitudes `⟨χ_b, ĝ⟩ ≈ √dt ĝ(τ_b)`.
//!
//! Expanding the bin exponential, `⟨0|M|0⟩ = 1 − i dt Υ + O(dt²)` with
//! `Υ = ReΥ − (i/2) ν*ν`, and `⟨0|M|s⟩ = −i √dt ν_s* + O(dt^{3/2})`.

use crate::davies::DaviesData;
use crate::fock::{FockBasis, FockError, FockSimulation};
use crate::linalg::{c, expm, gauss_legendre, kron, op_norm, zeros, CMat, CVec};
use crate::system_model::{CouplingDecomposition, DiscretizedReservoir, ReservoirModel, SegmentLabel, SmallSystem};
use num_complex::Complex64;
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DilationError {
    #[error("dt·‖ν‖² = {value:.3e} exceeds 0.1; reduce dt")]
    PerBinRegime { value: f64 },
    #[error("invalid lattice: {0}")]
    Lattice(String),
    #[error("time {t} lies beyond the lattice horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },
    #[error("time {t} is not a multiple of dt = {dt}")]
    OffLattice { t: f64, dt: f64 },
    #[error("per-bin cutoff {cutoff} cannot represent {needed} quanta")]
    CutoffTooSmall { cutoff: usize, needed: usize },
    #[error("profile support ({lo}, {hi}) exceeds the isometry range ({range_lo}, {range_hi})")]
    OutsideRange { lo: f64, hi: f64, range_lo: f64, range_hi: f64 },
    #[error("sup ‖g(x)‖ = {sup:.4} is not below 1")]
    NotContractive { sup: f64 },
    #[error("channel index {0} does not exist")]
    NoChannel(usize),
    #[error("fiber vector has length {got}, channel multiplicity is {expected}")]
    FiberMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Fock(#[from] FockError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeBinLattice {
    pub dt: f64,
    pub horizon: f64,
    pub noise_dim: usize,
    pub per_bin_cutoff: usize,
}

impl TimeBinLattice {
    pub fn new(dt: f64, horizon: f64, noise_dim: usize, per_bin_cutoff: usize) -> Result<Self, DilationError> {
        if !(dt > 0.0) || !(horizon >= 0.0) {
            return Err(DilationError::Lattice(format!("dt = {dt}, horizon = {horizon}")));
        }
        if per_bin_cutoff == 0 {
            return Err(DilationError::Lattice("per-bin cutoff must be at least 1".into()));
        }
        let n = horizon / dt;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
            return Err(DilationError::Lattice(format!("horizon {horizon} is not a multiple of dt {dt}")));
        }
        Ok(Self { dt, horizon, noise_dim, per_bin_cutoff })
    }

    pub fn bins(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Number of bins covering `[0, t]`.
    pub fn bins_for(&self, t: f64) -> Result<usize, DilationError> {
        if t.abs() > self.horizon * (1.0 + 1e-12) {
            return Err(DilationError::BeyondHorizon { t, horizon: self.horizon });
        }
        let n = t.abs() / self.dt;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
            return Err(DilationError::OffLattice { t, dt: self.dt });
        }
        Ok(n.round() as usize)
    }
}

#[derive(Clone, Debug)]
pub struct DilationPropagator {
    pub davies: DaviesData,
    pub lattice: TimeBinLattice,
    pub bin_basis: FockBasis,
    /// `M = exp(-i(dt ReΥ ⊗ 1 + √dt(ν ⊗ b† + ν* ⊗ b)))`, layout `bin_state * d + k`.
    pub per_bin_unitary: CMat,
    /// Channel frequency of each noise index.
    pub noise_frequencies: Vec<f64>,
}

pub fn build_dilation(davies: &DaviesData, dt: f64, horizon: f64, cutoff: usize) -> Result<DilationPropagator, DilationError> {
    let m = davies.noise_dim;
    let lattice = TimeBinLattice::new(dt, horizon, m, cutoff)?;
    let nu_sq = op_norm(&davies.nu_star_nu());
    if dt * nu_sq > 0.1 {
        return Err(DilationError::PerBinRegime { value: dt * nu_sq });
    }
    let d = davies.dim;
    let basis = FockBasis::new(m, cutoff)?;
    let dim = d * basis.len();
    let mut g = zeros(dim, dim);
    let re = davies.re_upsilon() * c(dt, 0.0);
    for n in 0..basis.len() {
        g.view_mut((n * d, n * d), (d, d)).copy_from(&re);
    }
    let slices = davies.nu_slices();
    let root = dt.sqrt();
    for n in 0..basis.len() {
        for (s, nu_s) in slices.iter().enumerate() {
            if let Some((up, amp)) = basis.raise(n, s) {
                let block = nu_s * c(root * amp, 0.0);
                g.view_mut((up * d, n * d), (d, d)).copy_from(&block);
                g.view_mut((n * d, up * d), (d, d)).copy_from(&block.adjoint());
            }
        }
    }
    let per_bin_unitary = expm(&(g * c(0.0, -1.0)));
    let mut noise_frequencies = vec![0.0; m];
    for b in &davies.nu_blocks {
        for mu in 0..b.multiplicity {
            noise_frequencies[b.offset + mu] = b.omega;
        }
    }
    Ok(DilationPropagator { davies: davies.clone(), lattice, bin_basis: basis, per_bin_unitary, noise_frequencies })
}

impl DilationPropagator {
    pub fn dim(&self) -> usize {
        self.davies.dim
    }

    /// `⟨a| M |b⟩` as a `d × d` block for bin basis states `a`, `b`.
    pub fn block(&self, a: usize, b: usize) -> CMat {
        let d = self.dim();
        self.per_bin_unitary.view((a * d, b * d), (d, d)).into_owned()
    }

    pub fn vacuum_block(&self) -> CMat {
        self.block(0, 0)
    }

    /// Bin basis index of a single quantum in noise mode `s`.
    pub fn single(&self, s: usize) -> usize {
        self.bin_basis.raise(0, s).expect("cutoff ≥ 1").0
    }

    pub fn unitarity_defect(&self) -> f64 {
        let n = self.per_bin_unitary.nrows();
        op_norm(&(self.per_bin_unitary.adjoint() * &self.per_bin_unitary - CMat::identity(n, n)))
    }

    /// `Φ(S) = Σ_n ⟨0|M|n⟩ S ⟨0|M|n⟩*`, the vacuum compression of `M (S ⊗ 1) M*`.
    pub fn collision_map(&self, s: &CMat) -> CMat {
        let d = self.dim();
        let mut out = zeros(d, d);
        for n in 0..self.bin_basis.len() {
            let b = self.block(0, n);
            out += &b * s * b.adjoint();
        }
        out
    }

    /// `Φ` as a superoperator on column-stacked `d × d` matrices.
    pub fn collision_superoperator(&self) -> CMat {
        let mut out = zeros(self.dim() * self.dim(), self.dim() * self.dim());
        for n in 0..self.bin_basis.len() {
            let b = self.block(0, n);
            out += kron(&b.conjugate(), &b);
        }
        out
    }
}

/// `I* U_t I` as the product of vacuum-compressed bin maps; `U_{-t} = U_t*`.
pub fn dilation_contraction(dp: &DilationPropagator, t: f64) -> Result<CMat, DilationError> {
    let n = dp.lattice.bins_for(t)?;
    let m00 = dp.vacuum_block();
    let mut out = CMat::identity(dp.dim(), dp.dim());
    for _ in 0..n {
        out = &m00 * out;
    }
    Ok(if t < 0.0 { out.adjoint() } else { out })
}

/// `Φⁿ(S)` with `n = t / dt`, the collision-model counterpart of `e^{tL}(S)`.
pub fn dilation_markov(dp: &DilationPropagator, t: f64, s: &CMat) -> Result<CMat, DilationError> {
    let n = dp.lattice.bins_for(t)?;
    let mut out = s.clone();
    for _ in 0..n {
        out = dp.collision_map(&out);
    }
    Ok(out)
}

/// `‖Φ(1) − 1‖`.
pub fn unitality_defect(dp: &DilationPropagator) -> f64 {
    let d = dp.dim();
    op_norm(&(dp.collision_map(&CMat::identity(d, d)) - CMat::identity(d, d)))
}

/// One-sided difference quotients of `t ↦ I* U_t I` at zero.
#[derive(Clone, Debug)]
pub struct DerivativeCheck {
    pub right: CMat,
    pub left: CMat,
    /// `−iΥ` and `−iΥ*`.
    pub expected_right: CMat,
    pub expected_left: CMat,
}

impl DerivativeCheck {
    pub fn error(&self) -> f64 {
        op_norm(&(&self.right - &self.expected_right)).max(op_norm(&(&self.left - &self.expected_left)))
    }

    /// `right − left`, which should approach `−ν*ν`.
    pub fn asymmetry(&self) -> CMat {
        &self.right - &self.left
    }
}

pub fn derivative_check(dp: &DilationPropagator) -> Result<DerivativeCheck, DilationError> {
    let dt = dp.lattice.dt;
    let d = dp.dim();
    let one = CMat::identity(d, d);
    let plus = dilation_contraction(dp, dt)?;
    let minus = dilation_contraction(dp, -dt)?;
    let ups = &dp.davies.upsilon;
    Ok(DerivativeCheck {
        right: (plus - &one) * c(1.0 / dt, 0.0),
        left: (&one - minus) * c(1.0 / dt, 0.0),
        expected_right: ups * c(0.0, -1.0),
        expected_left: ups.adjoint() * c(0.0, -1.0),
    })
}

/// `Z_ren = K + dΓ(⊕_ω ω 1_{R_ω})`.
#[derive(Clone, Debug)]
pub struct RenormalizerZren {
    pub k: CMat,
    pub channel_weights: Vec<f64>,
}

impl RenormalizerZren {
    pub fn new(sys: &SmallSystem, dp: &DilationPropagator) -> Self {
        Self { k: sys.hamiltonian.clone(), channel_weights: dp.noise_frequencies.clone() }
    }

    /// Restriction to `𝒦 ⊗ (one bin)`.
    pub fn bin_operator(&self, basis: &FockBasis) -> CMat {
        let d = self.k.nrows();
        let mut out = zeros(d * basis.len(), d * basis.len());
        for (n, occ) in basis.states.iter().enumerate() {
            let e: f64 = occ.iter().zip(&self.channel_weights).map(|(&q, w)| q as f64 * w).sum();
            let mut block = self.k.clone();
            for k in 0..d {
                block[(k, k)] += e;
            }
            out.view_mut((n * d, n * d), (d, d)).copy_from(&block);
        }
        out
    }

    /// `‖[Z_ren, M]‖` on one bin.
    pub fn commutator_defect(&self, dp: &DilationPropagator) -> f64 {
        let z = self.bin_operator(&dp.bin_basis);
        op_norm(&(&z * &dp.per_bin_unitary - &dp.per_bin_unitary * &z))
    }
}

/// A conservation test state: system vector tensored with at most one quantum
/// of noise mode `s` in bin `b`.
#[derive(Clone, Debug)]
pub struct ZrenTestState {
    pub system: CVec,
    pub quantum: Option<(usize, usize)>,
}

/// `max |⟨ψ|U_t* Z_ren U_t|ψ⟩ − ⟨ψ|Z_ren|ψ⟩|` over the test states.
///
/// Each bin meets the system once, so the state is carried as a system density
/// matrix, with the occupied bin joined in while it is processed and every
/// processed bin traced out after its energy is recorded.
pub fn zren_conservation(
    dp: &DilationPropagator,
    zren: &RenormalizerZren,
    t: f64,
    tests: &[ZrenTestState],
) -> Result<f64, DilationError> {
    let n = dp.lattice.bins_for(t)?;
    let d = dp.dim();
    let nb = dp.bin_basis.len();
    let zbin = zren.bin_operator(&dp.bin_basis);
    let kpart = zren.k.clone();
    let u = &dp.per_bin_unitary;
    let field_energy = |occ_index: usize| -> f64 {
        dp.bin_basis.states[occ_index].iter().zip(&zren.channel_weights).map(|(&q, w)| q as f64 * w).sum()
    };
    let mut worst: f64 = 0.0;
    for st in tests {
        let chi = &st.system;
        let rho0 = chi * chi.adjoint();
        let mut initial = (&kpart * &rho0).trace().re;
        let mut special = None;
        if let Some((bin, s)) = st.quantum {
            let idx = dp.single(s);
            initial += field_energy(idx) * rho0.trace().re;
            special = Some((bin, idx));
        }
        let mut rho = rho0;
        let mut radiated = 0.0;
        for b in 0..n {
            let occ = match special {
                Some((sb, idx)) if sb == b => idx,
                _ => 0,
            };
            let mut joint = zeros(d * nb, d * nb);
            joint.view_mut((occ * d, occ * d), (d, d)).copy_from(&rho);
            let after = u * joint * u.adjoint();
            // Field part of Z_ren on this bin, then trace the bin out.
            let field = &zbin - kron(&CMat::identity(nb, nb), &kpart);
            radiated += (&field * &after).trace().re;
            let mut reduced = zeros(d, d);
            for q in 0..nb {
                reduced += after.view((q * d, q * d), (d, d));
            }
            rho = reduced;
        }
        let mut fin = (&kpart * &rho).trace().re + radiated;
        if let Some((sb, idx)) = special {
            if sb >= n {
                fin += field_energy(idx) * rho.trace().re;
            }
        }
        worst = worst.max((fin - initial).abs());
    }
    Ok(worst)
}

/// Normalized one-particle profile on the relative-frequency axis.
#[derive(Clone, Debug, PartialEq)]
pub enum WavePacket {
    /// `(2πσ²)^{-1/4} e^{-(x−c)²/(4σ²)} e^{i delay x}`; arrives at `τ = delay`.
    Gaussian { center: f64, width: f64, delay: f64 },
    /// Normalized indicator of `(a, b)`.
    Window { a: f64, b: f64 },
    /// Normalized `exp(1 − 1/(1 − u²))`, `u = (x − c)/half_width`.
    Bump { center: f64, half_width: f64 },
}

const BUMP_NORM_SQ: f64 = 0.9833808129127262;

impl WavePacket {
    pub fn freq(&self, x: f64) -> Complex64 {
        match *self {
            WavePacket::Gaussian { center, width, delay } => {
                let n = (2.0 * PI * width * width).powf(-0.25);
                Complex64::from_polar(n * (-(x - center).powi(2) / (4.0 * width * width)).exp(), delay * x)
            }
            WavePacket::Window { a, b } => {
                if x > a && x < b {
                    c(1.0 / (b - a).sqrt(), 0.0)
                } else {
                    c(0.0, 0.0)
                }
            }
            WavePacket::Bump { center, half_width } => {
                let u = (x - center) / half_width;
                if u.abs() < 1.0 {
                    c((1.0 - 1.0 / (1.0 - u * u)).exp() / (BUMP_NORM_SQ * half_width).sqrt(), 0.0)
                } else {
                    c(0.0, 0.0)
                }
            }
        }
    }

    /// `ĝ(τ) = (2π)^{-1/2} ∫ e^{-iτx} g(x) dx`.
    pub fn time(&self, tau: f64) -> Complex64 {
        match *self {
            WavePacket::Gaussian { center, width, delay } => {
                let k = tau - delay;
                let amp = (2.0 * PI).powf(-0.5) * (2.0 * PI * width * width).powf(-0.25) * (4.0 * PI * width * width).sqrt();
                Complex64::from_polar(amp * (-width * width * k * k).exp(), -k * center)
            }
            WavePacket::Window { a, b } => {
                let pre = (2.0 * PI).powf(-0.5) / (b - a).sqrt();
                if tau.abs() < 1e-12 {
                    c(pre * (b - a), 0.0)
                } else {
                    (Complex64::from_polar(1.0, -tau * a) - Complex64::from_polar(1.0, -tau * b)) / c(0.0, tau) * pre
                }
            }
            WavePacket::Bump { .. } => {
                let (lo, hi) = self.support();
                let mut acc = c(0.0, 0.0);
                panel_quadrature(lo, hi, 16, |x, w| acc += Complex64::from_polar(w, -tau * x) * self.freq(x));
                acc * (2.0 * PI).powf(-0.5)
            }
        }
    }

    /// Exact support, or a `±12σ` window for Gaussians.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            WavePacket::Gaussian { center, width, .. } => (center - 12.0 * width, center + 12.0 * width),
            WavePacket::Window { a, b } => (a, b),
            WavePacket::Bump { center, half_width } => (center - half_width, center + half_width),
        }
    }

    pub fn compactly_supported(&self) -> bool {
        !matches!(self, WavePacket::Gaussian { .. })
    }
}

/// Composite 16-point Gauss–Legendre on `panels` equal panels.
fn panel_quadrature(a: f64, b: f64, panels: usize, mut f: impl FnMut(f64, f64)) {
    let (x, w) = gauss_legendre(16);
    let h = (b - a) / panels as f64;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            f(lo + 0.5 * h * (xi + 1.0), 0.5 * h * wi);
        }
    }
}

/// An element of the asymptotic one-particle space `L²(ℝ, 𝔥_ω)` of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct AsymptoticVector {
    pub channel: usize,
    pub fiber: CVec,
    pub packet: WavePacket,
}

impl AsymptoticVector {
    pub fn scalar(channel: usize, packet: WavePacket) -> Self {
        Self { channel, fiber: CVec::from_element(1, c(1.0, 0.0)), packet }
    }

    pub fn freq(&self, x: f64) -> CVec {
        &self.fiber * self.packet.freq(x)
    }

    pub fn time(&self, tau: f64) -> CVec {
        &self.fiber * self.packet.time(tau)
    }

    /// `⟨self, A g⟩` for a multiplication operator `A(x)` on the fiber.
    pub fn inner_with(&self, other: &AsymptoticVector, op: impl Fn(f64) -> CMat) -> Complex64 {
        if self.channel != other.channel {
            return c(0.0, 0.0);
        }
        let (a0, a1) = self.packet.support();
        let (b0, b1) = other.packet.support();
        let (lo, hi) = (a0.max(b0), a1.min(b1));
        if hi <= lo {
            return c(0.0, 0.0);
        }
        let mut acc = c(0.0, 0.0);
        panel_quadrature(lo, hi, 96, |x, w| {
            acc += self.freq(x).dotc(&(op(x) * other.freq(x))) * w;
        });
        acc
    }

    pub fn inner(&self, other: &AsymptoticVector) -> Complex64 {
        let m = self.fiber.len();
        self.inner_with(other, |_| CMat::identity(m, m))
    }
}

/// Per-channel scaling maps `(J_{λ,ω} g)(y) = λ⁻¹ g((y − ω)/λ²)` on `I_ω`.
#[derive(Clone, Debug)]
pub struct ScalingIsometry {
    pub lambda: f64,
    /// `(ω, I_ω, multiplicity)` per channel.
    pub channels: Vec<(f64, (f64, f64), usize)>,
}

impl ScalingIsometry {
    pub fn new(res: &ReservoirModel, lambda: f64) -> Self {
        let channels = res
            .channels
            .iter()
            .map(|ch| {
                let omega = match ch.label {
                    SegmentLabel::Bohr(w) => w,
                    SegmentLabel::Off => 0.5 * (ch.interval.0 + ch.interval.1),
                };
                (omega, ch.interval, ch.multiplicity)
            })
            .collect();
        Self { lambda, channels }
    }

    /// `λ⁻²(I_ω − ω)`.
    pub fn range(&self, channel: usize) -> (f64, f64) {
        let (w, (a, b), _) = self.channels[channel];
        let s = 1.0 / (self.lambda * self.lambda);
        (s * (a - w), s * (b - w))
    }

    fn check(&self, v: &AsymptoticVector) -> Result<(), DilationError> {
        let Some(&(_, _, m)) = self.channels.get(v.channel) else {
            return Err(DilationError::NoChannel(v.channel));
        };
        if v.fiber.len() != m {
            return Err(DilationError::FiberMismatch { got: v.fiber.len(), expected: m });
        }
        Ok(())
    }

    /// Rejects compactly supported profiles that leave the range.
    pub fn check_support(&self, v: &AsymptoticVector) -> Result<(), DilationError> {
        self.check(v)?;
        if v.packet.compactly_supported() {
            let (lo, hi) = v.packet.support();
            let (range_lo, range_hi) = self.range(v.channel);
            if lo < range_lo || hi > range_hi {
                return Err(DilationError::OutsideRange { lo, hi, range_lo, range_hi });
            }
        }
        Ok(())
    }

    /// `(J_λ g)(y)` as a fiber vector; zero outside `I_ω`.
    pub fn push(&self, v: &AsymptoticVector, y: f64) -> CVec {
        let (w, (a, b), m) = self.channels[v.channel];
        if y <= a || y >= b {
            return CVec::zeros(m);
        }
        let l2 = self.lambda * self.lambda;
        v.freq((y - w) / l2) * c(1.0 / self.lambda, 0.0)
    }

    /// `(J_λ* f)(x) = λ f(ω + λ² x)` on the range, zero outside.
    pub fn pull(&self, channel: usize, f: impl Fn(f64) -> CVec, x: f64) -> CVec {
        let (w, _, m) = self.channels[channel];
        let (lo, hi) = self.range(channel);
        if x <= lo || x >= hi {
            return CVec::zeros(m);
        }
        f(w + self.lambda * self.lambda * x) * c(self.lambda, 0.0)
    }

    /// `J_λ g` as a mode-space vector of the discretized reservoir.
    pub fn embed(&self, disc: &DiscretizedReservoir, v: &AsymptoticVector) -> Result<CVec, DilationError> {
        self.check(v)?;
        Ok(disc.sample(|mode| {
            if mode.channel == Some(v.channel) {
                self.push(v, mode.frequency)[mode.fiber]
            } else {
                c(0.0, 0.0)
            }
        }))
    }
}

/// Grid inner product `Σ_i conj(a_i) A_i b_i` with `A_i` acting across the
/// fibers of each node.
fn grid_inner(disc: &DiscretizedReservoir, a: &CVec, b: &CVec, op: &dyn Fn(f64) -> CMat) -> Complex64 {
    let mut acc = c(0.0, 0.0);
    let mut i = 0;
    while i < disc.len() {
        let x = disc.modes[i].frequency;
        let seg = disc.modes[i].segment;
        let mut j = i;
        while j < disc.len() && disc.modes[j].segment == seg && disc.modes[j].frequency == x {
            j += 1;
        }
        let m = j - i;
        let a_blk = a.rows(i, m);
        let b_blk = b.rows(i, m);
        if a_blk.iter().any(|z| z.norm() > 0.0) && b_blk.iter().any(|z| z.norm() > 0.0) {
            let opx = op(x);
            let opx = if opx.nrows() == m { opx } else { CMat::identity(m, m) * opx[(0, 0)] };
            acc += a_blk.dotc(&(opx * b_blk));
        }
        i = j;
    }
    acc
}

fn permanent2(m: [[Complex64; 2]; 2]) -> Complex64 {
    m[0][0] * m[1][1] + m[0][1] * m[1][0]
}

/// Test vectors for the free-dynamics and `Θ` compressions. Two-particle
/// states are `a*(g₁)a*(g₂)Ω`, not normalized.
#[derive(Clone, Debug)]
pub enum FieldTest {
    One { out: AsymptoticVector, inp: AsymptoticVector },
    Two { out: [AsymptoticVector; 2], inp: [AsymptoticVector; 2] },
}

impl FieldTest {
    fn vectors(&self) -> Vec<&AsymptoticVector> {
        match self {
            FieldTest::One { out, inp } => vec![out, inp],
            FieldTest::Two { out, inp } => out.iter().chain(inp.iter()).collect(),
        }
    }

    fn combine(&self, pair: impl Fn(&AsymptoticVector, &AsymptoticVector) -> Complex64) -> Complex64 {
        match self {
            FieldTest::One { out, inp } => pair(out, inp),
            FieldTest::Two { out, inp } => permanent2([
                [pair(&out[0], &inp[0]), pair(&out[0], &inp[1])],
                [pair(&out[1], &inp[0]), pair(&out[1], &inp[1])],
            ]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub label: String,
    pub lhs: Complex64,
    pub rhs: Complex64,
}

impl ComparisonRow {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).norm()
    }
}

/// `⟨e_k ⊗ out| e^{iλ⁻²tZ_ren} Γ(J*_λ) e^{-iλ⁻²tH₀} Γ(J_λ) |e_k ⊗ in⟩` on the grid
/// against `⟨out| e^{-it dΓ(Z_R)} |in⟩`, for each `K` eigenvector `k`.
pub fn free_dynamics_limit(
    sys: &SmallSystem,
    res: &ReservoirModel,
    disc: &DiscretizedReservoir,
    lambda: f64,
    t: f64,
    tests: &[FieldTest],
) -> Result<Vec<ComparisonRow>, DilationError> {
    let j = ScalingIsometry::new(res, lambda);
    let s = t / (lambda * lambda);
    let mut rows = Vec::new();
    for (ti, test) in tests.iter().enumerate() {
        for v in test.vectors() {
            j.check_support(v)?;
        }
        let mut embedded = std::collections::HashMap::new();
        for v in test.vectors() {
            let key = format!("{v:?}");
            if let std::collections::hash_map::Entry::Vacant(e) = embedded.entry(key) {
                e.insert(j.embed(disc, v)?);
            }
        }
        let out_channels: f64 = match test {
            FieldTest::One { out, .. } => j.channels[out.channel].0,
            FieldTest::Two { out, .. } => j.channels[out[0].channel].0 + j.channels[out[1].channel].0,
        };
        let lhs_pair = |a: &AsymptoticVector, b: &AsymptoticVector| {
            let va = &embedded[&format!("{a:?}")];
            let vb = &embedded[&format!("{b:?}")];
            grid_inner(disc, va, vb, &|x| CMat::identity(1, 1) * Complex64::from_polar(1.0, -s * x))
        };
        let rhs_pair = |a: &AsymptoticVector, b: &AsymptoticVector| {
            let m = a.fiber.len();
            a.inner_with(b, |x| CMat::identity(m, m) * Complex64::from_polar(1.0, -t * x))
        };
        let field_lhs = test.combine(lhs_pair);
        let field_rhs = test.combine(rhs_pair);
        for (k, e) in sys.eigenvalues.iter().enumerate() {
            // System phases of e^{iλ⁻²tZ_ren} and e^{-iλ⁻²tH₀} on the eigenvector.
            let phase = Complex64::from_polar(1.0, s * (e + out_channels)) * Complex64::from_polar(1.0, -s * e);
            rows.push(ComparisonRow { label: format!("test{ti}/k{k}"), lhs: phase * field_lhs, rhs: field_rhs });
        }
    }
    Ok(rows)
}

/// Both sides of the annihilator convergence statement.
#[derive(Clone, Debug)]
pub struct AnnihilatorLimit {
    pub first: Complex64,
    /// `None` when `φ_j` has no resonant frequency.
    pub second: Option<Complex64>,
}

/// `(⟨g, λ⁻¹J_λ* e^{iλ⁻²t(H_R − ω(j))} φ_j⟩, ⟨g, e^{itZ_R}|1⟩ ⊗ φ_j(ω(j))⟩)`.
pub fn annihilator_limit(
    decomp: &CouplingDecomposition,
    j: usize,
    t: f64,
    lambda: f64,
    g: &AsymptoticVector,
) -> Result<AnnihilatorLimit, DilationError> {
    let iso = ScalingIsometry::new(decomp.reservoir(), lambda);
    iso.check(g)?;
    let (omega_c, _, m) = iso.channels[g.channel];
    let omega_j = decomp.terms[j].omega;
    let reference = omega_j.unwrap_or(omega_c);
    let l2 = lambda * lambda;
    let (r0, r1) = iso.range(g.channel);
    let (s0, s1) = g.packet.support();
    let (lo, hi) = (r0.max(s0), r1.min(s1));
    let fiber_at = |x: f64| {
        let v = decomp.phi_at(j, x);
        if v.len() == m {
            v
        } else {
            CVec::zeros(m)
        }
    };
    let mut first = c(0.0, 0.0);
    if hi > lo {
        let panels = (((hi - lo) * (1.0 + t.abs())) / 2.0).ceil().max(32.0) as usize;
        panel_quadrature(lo, hi, panels, |x, w| {
            let phase = Complex64::from_polar(1.0, t * x + t / l2 * (omega_c - reference));
            first += g.freq(x).dotc(&fiber_at(omega_c + l2 * x)) * phase * w;
        });
    }
    let second = omega_j.map(|w| {
        if (w - omega_c).abs() > 1e-12 {
            return c(0.0, 0.0);
        }
        let value = fiber_at(w);
        let mut acc = c(0.0, 0.0);
        let (a, b) = g.packet.support();
        let panels = (((b - a) * (1.0 + t.abs())) / 2.0).ceil().max(32.0) as usize;
        panel_quadrature(a, b, panels, |x, wt| {
            acc += g.freq(x).dotc(&value) * Complex64::from_polar(wt, t * x);
        });
        acc
    });
    Ok(AnnihilatorLimit { first, second })
}

/// `Θ` on generators `S ⊗ Γ(G)`, `G` multiplication by `g(x)` on the fibers.
#[derive(Clone)]
pub struct ThetaMap {
    pub s: CMat,
    pub g: Arc<dyn Fn(f64) -> CMat + Send + Sync>,
    /// `(ω, offset, multiplicity)` per channel.
    pub channels: Vec<(f64, usize, usize)>,
    pub noise_dim: usize,
}

impl std::fmt::Debug for ThetaMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThetaMap").field("s", &self.s).field("channels", &self.channels).finish()
    }
}

impl ThetaMap {
    /// Validates `sup ‖g(x)‖ < 1` on a dense sample of every segment.
    pub fn new(s: CMat, g: Arc<dyn Fn(f64) -> CMat + Send + Sync>, res: &ReservoirModel) -> Result<Self, DilationError> {
        let mut sup: f64 = 0.0;
        for seg in res.segments() {
            let (a, b) = seg.interval;
            for i in 0..=400 {
                let x = a + (b - a) * i as f64 / 400.0;
                sup = sup.max(op_norm(&g(x)));
            }
        }
        if sup >= 1.0 {
            return Err(DilationError::NotContractive { sup });
        }
        let offsets = res.noise_offsets();
        let channels = res
            .channels
            .iter()
            .zip(offsets)
            .map(|(ch, o)| {
                let w = match ch.label {
                    SegmentLabel::Bohr(w) => w,
                    SegmentLabel::Off => 0.5 * (ch.interval.0 + ch.interval.1),
                };
                (w, o, ch.multiplicity)
            })
            .collect();
        Ok(Self { s, g, channels, noise_dim: res.noise_dim() })
    }

    /// `⊕_ω g(ω)` on `𝔥`.
    pub fn noise_matrix(&self) -> CMat {
        let mut out = zeros(self.noise_dim, self.noise_dim);
        for &(w, o, m) in &self.channels {
            let gw = (self.g)(w);
            let gw = if gw.nrows() == m { gw } else { CMat::identity(m, m) * gw[(0, 0)] };
            out.view_mut((o, o), (m, m)).copy_from(&gw);
        }
        out
    }

    /// The generator `(S₁S₂) ⊗ Γ(G₁G₂)`.
    pub fn compose(&self, other: &ThetaMap) -> ThetaMap {
        let (g1, g2) = (self.g.clone(), other.g.clone());
        ThetaMap {
            s: &self.s * &other.s,
            g: Arc::new(move |x| g1(x) * g2(x)),
            channels: self.channels.clone(),
            noise_dim: self.noise_dim,
        }
    }
}

/// `Γ(X)` on a particle-number-truncated Fock space over `X`'s modes.
pub fn second_quantize(basis: &FockBasis, x: &CMat) -> CMat {
    let n = basis.len();
    let modes = basis.modes;
    let mut out = zeros(n, n);
    let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
    for (col, occ) in basis.states.iter().enumerate() {
        // Γ(X) Π (a*_s)^{n_s}/√n_s! Ω = Π (a*(X e_s))^{n_s}/√n_s! Ω.
        let factors: Vec<usize> = occ.iter().enumerate().flat_map(|(s, &q)| std::iter::repeat_n(s, q as usize)).collect();
        let norm = occ.iter().map(|&q| fact(q as usize)).product::<f64>().sqrt();
        let p = factors.len();
        let mut choice = vec![0usize; p];
        loop {
            let mut coef = c(1.0 / norm, 0.0);
            let mut target = vec![0u8; modes];
            for (slot, &s) in factors.iter().enumerate() {
                coef *= x[(choice[slot], s)];
                target[choice[slot]] += 1;
            }
            if coef.norm() > 0.0 {
                let row = basis.index_of(&target).expect("number preserved");
                let amp = target.iter().map(|&q| fact(q as usize)).product::<f64>().sqrt();
                out[(row, col)] += coef * amp;
            }
            let mut k = 0;
            loop {
                if k == p {
                    break;
                }
                choice[k] += 1;
                if choice[k] < modes {
                    break;
                }
                choice[k] = 0;
                k += 1;
            }
            if k == p {
                break;
            }
        }
    }
    out
}

/// `S ⊗ Γ(⊕_ω g(ω))^{⊗ bins}` on `𝒦 ⊗ (bin Fock space)^{⊗ bins}`.
pub fn theta_apply(theta: &ThetaMap, cutoff: usize, bins: usize) -> Result<CMat, DilationError> {
    let basis = FockBasis::new(theta.noise_dim, cutoff)?;
    let per_bin = second_quantize(&basis, &theta.noise_matrix());
    let mut field = CMat::identity(1, 1);
    for _ in 0..bins {
        field = kron(&field, &per_bin);
    }
    Ok(kron(&field, &theta.s))
}

/// `⟨Γ(J_λ) out, Γ(G) Γ(J_λ) in⟩` on the grid against `⟨out, Γ(⊕ g(ω)) in⟩`.
pub fn theta_compression(
    res: &ReservoirModel,
    disc: &DiscretizedReservoir,
    lambda: f64,
    theta: &ThetaMap,
    tests: &[FieldTest],
) -> Result<Vec<ComparisonRow>, DilationError> {
    let j = ScalingIsometry::new(res, lambda);
    let mut rows = Vec::new();
    for (ti, test) in tests.iter().enumerate() {
        for v in test.vectors() {
            j.check_support(v)?;
        }
        let lhs = test.combine(|a, b| {
            let (va, vb) = (j.embed(disc, a).unwrap(), j.embed(disc, b).unwrap());
            grid_inner(disc, &va, &vb, &|x| (theta.g)(x))
        });
        let rhs = test.combine(|a, b| {
            let (w, _, m) = theta.channels[b.channel];
            let gw = (theta.g)(w);
            let gw = if gw.nrows() == m { gw } else { CMat::identity(m, m) * gw[(0, 0)] };
            a.inner_with(b, |_| gw.clone())
        });
        rows.push(ComparisonRow { label: format!("test{ti}"), lhs, rhs });
    }
    Ok(rows)
}

/// Field content of an extended matrix element: vacuum or one asymptotic particle.
#[derive(Clone, Debug)]
pub enum FieldState {
    Vacuum,
    One(AsymptoticVector),
}

/// Both sides of one extended-limit block, as `d × d` matrices over system indices.
#[derive(Clone, Debug)]
pub struct ExtendedElement {
    pub lhs: CMat,
    pub rhs: CMat,
}

impl ExtendedElement {
    pub fn gap(&self) -> f64 {
        op_norm(&(&self.lhs - &self.rhs))
    }
}

/// Noise-space bin amplitudes `⟨χ_b, ĝ⟩ ≈ √dt ĝ(τ_b)` for the bins covering `[t₀, t)`.
fn bin_images(
    v: &AsymptoticVector,
    offsets: &[usize],
    noise_dim: usize,
    dt: f64,
    t0: f64,
    bins: usize,
) -> Vec<CVec> {
    (0..bins)
        .map(|b| {
            let tau = t0 + (b as f64 + 0.5) * dt;
            let mut out = CVec::zeros(noise_dim);
            let amp = v.time(tau) * c(dt.sqrt(), 0.0);
            for (mu, a) in amp.iter().enumerate() {
                out[offsets[v.channel] + mu] = *a;
            }
            out
        })
        .collect()
}

/// `⟨out| e^{itdΓ(Z_R)} U_{t−t₀} e^{-it₀dΓ(Z_R)} |in⟩` on `𝒦`-blocks via the bin cascade.
///
/// Every bin meets the system once; after processing it is projected on
/// vacuum or on the out quantum, so four system-operator branches suffice:
/// in-quantum pending or consumed, times out-quantum emitted or not.
pub fn dilation_field_element(
    dp: &DilationPropagator,
    offsets: &[usize],
    t: f64,
    t0: f64,
    out: &FieldState,
    inp: &FieldState,
) -> Result<CMat, DilationError> {
    let n = dp.lattice.bins_for(t - t0)?;
    let d = dp.dim();
    let m = dp.davies.noise_dim;
    let dt = dp.lattice.dt;
    let zero = zeros(d, d);
    let image = |f: &FieldState| match f {
        FieldState::Vacuum => None,
        FieldState::One(v) => Some(bin_images(v, offsets, m, dt, t0, n)),
    };
    let (gin, hout) = (image(inp), image(out));
    let m00 = dp.vacuum_block();
    let singles: Vec<usize> = (0..m).map(|s| dp.single(s)).collect();
    let to_vac: Vec<CMat> = singles.iter().map(|&i| dp.block(0, i)).collect();
    let from_vac: Vec<CMat> = singles.iter().map(|&i| dp.block(i, 0)).collect();
    let one = CMat::identity(d, d);
    // P: in pending, out not emitted. Q: in consumed. R: out emitted, in pending. S: both.
    let (mut p, mut q, mut r, mut s) = match inp {
        FieldState::Vacuum => (zero.clone(), one.clone(), zero.clone(), zero.clone()),
        FieldState::One(_) => (one.clone(), zero.clone(), zero.clone(), zero.clone()),
    };
    for b in 0..n {
        let a_in = gin.as_ref().map(|g| {
            let mut acc = zeros(d, d);
            for (sidx, blk) in to_vac.iter().enumerate() {
                if g[b][sidx].norm() > 0.0 {
                    acc += blk * g[b][sidx];
                }
            }
            acc
        });
        let a_em = hout.as_ref().map(|h| {
            let mut acc = zeros(d, d);
            for (sidx, blk) in from_vac.iter().enumerate() {
                if h[b][sidx].norm() > 0.0 {
                    acc += blk * h[b][sidx].conj();
                }
            }
            acc
        });
        let a_pass = match (&gin, &hout) {
            (Some(g), Some(h)) => {
                let mut acc = zeros(d, d);
                for (so, &io) in singles.iter().enumerate() {
                    for (si, &ii) in singles.iter().enumerate() {
                        let w = h[b][so].conj() * g[b][si];
                        if w.norm() > 0.0 {
                            acc += dp.block(io, ii) * w;
                        }
                    }
                }
                Some(acc)
            }
            _ => None,
        };
        let mut s_new = &m00 * &s;
        let mut q_new = &m00 * &q;
        let mut r_new = &m00 * &r;
        if let Some(em) = &a_em {
            s_new += em * &q;
            r_new += em * &p;
        }
        if let Some(pass) = &a_pass {
            s_new += pass * &p;
        }
        if let Some(ain) = &a_in {
            s_new += ain * &r;
            q_new += ain * &p;
        }
        p = &m00 * &p;
        (q, r, s) = (q_new, r_new, s_new);
    }
    Ok(match (inp, out) {
        (FieldState::Vacuum, FieldState::Vacuum) => q,
        (FieldState::One(_), FieldState::Vacuum) => q,
        (FieldState::Vacuum, FieldState::One(_)) => s,
        (FieldState::One(g), FieldState::One(h)) => {
            let window: Complex64 = hout
                .as_ref()
                .unwrap()
                .iter()
                .zip(gin.as_ref().unwrap())
                .map(|(hb, gb)| hb.dotc(gb))
                .sum();
            s + p * (h.inner(g) - window)
        }
    })
}

/// Continuum oracle for [`dilation_field_element`] by direct time quadrature.
pub fn field_element_series(
    dd: &DaviesData,
    offsets: &[usize],
    t: f64,
    t0: f64,
    out: &FieldState,
    inp: &FieldState,
    points: usize,
) -> CMat {
    let d = dd.dim;
    let slices = dd.nu_slices();
    let evolve = |dt: f64| dd.contraction(dt);
    let emit = |h: &AsymptoticVector, r: f64| {
        let amp = h.time(r);
        let mut acc = zeros(d, d);
        for (mu, a) in amp.iter().enumerate() {
            acc += &slices[offsets[h.channel] + mu] * a.conj();
        }
        acc
    };
    let absorb = |g: &AsymptoticVector, r: f64| {
        let amp = g.time(r);
        let mut acc = zeros(d, d);
        for (mu, a) in amp.iter().enumerate() {
            acc += slices[offsets[g.channel] + mu].adjoint() * *a;
        }
        acc
    };
    let mi = c(0.0, -1.0);
    let (x1, w1) = gauss_legendre(points);
    let half = 0.5 * (t - t0);
    let map = |u: f64| t0 + half * (u + 1.0);
    match (inp, out) {
        (FieldState::Vacuum, FieldState::Vacuum) => evolve(t - t0),
        (FieldState::Vacuum, FieldState::One(h)) => {
            let mut acc = zeros(d, d);
            for (u, w) in x1.iter().zip(&w1) {
                let r = map(*u);
                acc += evolve(t - r) * emit(h, r) * evolve(r - t0) * c(w * half, 0.0);
            }
            acc * mi
        }
        (FieldState::One(g), FieldState::Vacuum) => {
            let mut acc = zeros(d, d);
            for (u, w) in x1.iter().zip(&w1) {
                let r = map(*u);
                acc += evolve(t - r) * absorb(g, r) * evolve(r - t0) * c(w * half, 0.0);
            }
            acc * mi
        }
        (FieldState::One(g), FieldState::One(h)) => {
            let mut acc = evolve(t - t0) * h.inner(g);
            let rule = crate::combinatorics::simplex_quadrature(2, t0, t, points).expect("interval");
            for (nodes, w) in rule.nodes.iter().zip(&rule.weights) {
                let (r1, r2) = (nodes[0], nodes[1]);
                let absorbed_first = evolve(t - r2) * emit(h, r2) * evolve(r2 - r1) * absorb(g, r1) * evolve(r1 - t0);
                let emitted_first = evolve(t - r2) * absorb(g, r2) * evolve(r2 - r1) * emit(h, r1) * evolve(r1 - t0);
                acc += (absorbed_first + emitted_first) * c(-w, 0.0);
            }
            acc
        }
    }
}

/// `⟨Γ(J_λ) out| T_λ(λ⁻²t, λ⁻²t₀) |Γ(J_λ) in⟩` on the truncated Fock space
/// against the dilation element of the same asymptotic states.
pub fn extended_wcl_matrix_element(
    sim: &FockSimulation,
    res: &ReservoirModel,
    disc: &DiscretizedReservoir,
    dp: &DilationPropagator,
    t: f64,
    t0: f64,
    out: &FieldState,
    inp: &FieldState,
) -> Result<ExtendedElement, DilationError> {
    let lambda = sim.lambda;
    if sim.basis.n_max < 1 {
        return Err(DilationError::CutoffTooSmall { cutoff: sim.basis.n_max, needed: 1 });
    }
    let iso = ScalingIsometry::new(res, lambda);
    let scale = 1.0 / (lambda * lambda);
    sim.check_horizon(scale * (t - t0))?;
    let d = sim.sys.dim;
    let embed = |f: &FieldState| -> Result<Option<CVec>, DilationError> {
        match f {
            FieldState::Vacuum => Ok(None),
            FieldState::One(v) => {
                iso.check_support(v)?;
                Ok(Some(iso.embed(disc, v)?))
            }
        }
    };
    let (fin, fout) = (embed(inp)?, embed(out)?);
    let mut lhs = zeros(d, d);
    for l in 0..d {
        let psi = match &fin {
            None => sim.embed_vacuum(l),
            Some(f) => sim.embed_one_particle(l, f)?,
        };
        let psi = sim.interaction_step(scale * t, scale * t0, &psi)?;
        let col = match &fout {
            None => sim.project_vacuum(&psi),
            Some(f) => sim.project_one_particle(f, &psi),
        };
        lhs.set_column(l, &col);
    }
    let rhs = dilation_field_element(dp, &res.noise_offsets(), t, t0, out, inp)?;
    Ok(ExtendedElement { lhs, rhs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::davies::{build_lindblad, compute_upsilon, evolve_semigroup, UpsilonMethod};
    use crate::linalg::{diag_real, eye, fro, hermiticity_defect};
    use crate::model_file::{bundled_models, parse_model};

    fn flat_davies() -> (SmallSystem, ReservoirModel, DaviesData) {
        let spec = parse_model(bundled_models()[0].1).unwrap();
        let dd = compute_upsilon(&spec.system, &spec.reservoir, UpsilonMethod::plemelj()).unwrap();
        (spec.system, spec.reservoir, dd)
    }

    #[test]
    fn lattice_validation() {
        assert!(TimeBinLattice::new(0.3, 1.0, 1, 1).is_err());
        assert!(TimeBinLattice::new(0.25, 1.0, 1, 0).is_err());
        let l = TimeBinLattice::new(0.25, 1.0, 1, 1).unwrap();
        assert_eq!(l.bins(), 4);
        assert!(l.bins_for(0.3).is_err());
        assert!(l.bins_for(2.0).is_err());
    }

    #[test]
    fn bin_unitary_is_unitary_and_decoupled_limit() {
        let (_, _, dd) = flat_davies();
        let dp = build_dilation(&dd, 1e-2, 1.0, 1).unwrap();
        assert!(dp.unitarity_defect() < 1e-12);
        let free = build_dilation(&dd.decoupled(), 1e-2, 1.0, 1).unwrap();
        let got = dilation_contraction(&free, 1.0).unwrap();
        let want = expm(&(dd.re_upsilon() * c(0.0, -1.0)));
        assert!(fro(&(got - want)) < 1e-12);
        assert!(fro(&(dilation_contraction(&dp, 0.0).unwrap() - eye(2))) == 0.0);
    }

    #[test]
    fn one_bin_taylor_expansion() {
        let (_, _, dd) = flat_davies();
        let mut prev: Option<f64> = None;
        for dt in [1e-2f64, 5e-3, 2.5e-3] {
            let dp = build_dilation(&dd, dt, dt, 1).unwrap();
            let first = eye(2) - &dd.upsilon * c(0.0, dt);
            let rem = op_norm(&(dp.vacuum_block() - first)) / (dt * dt);
            if let Some(p) = prev {
                assert!((rem / p - 1.0f64).abs() < 0.05, "{rem} vs {p}");
            }
            prev = Some(rem);
            for s in 0..dd.noise_dim {
                let want = dd.nu_slice(s).adjoint() * c(0.0, -dt.sqrt());
                assert!(op_norm(&(dp.block(0, dp.single(s)) - want)) < 10.0 * dt.powf(1.5));
            }
        }
    }

    #[test]
    fn contraction_and_markov_converge_first_order() {
        let (_, _, dd) = flat_davies();
        let l = build_lindblad(&dd).unwrap();
        let sz = diag_real(&[1.0, -1.0]);
        let mut errs = Vec::new();
        for dt in [2e-3, 1e-3] {
            let dp = build_dilation(&dd, dt, 1.0, 1).unwrap();
            let e1 = op_norm(&(dilation_contraction(&dp, 1.0).unwrap() - dd.contraction(1.0)));
            let e2 = op_norm(&(dilation_markov(&dp, 1.0, &sz).unwrap() - evolve_semigroup(&l, 1.0, &sz)));
            errs.push((e1, e2));
        }
        assert!(errs[1].0 < 5e-3 && errs[1].1 < 5e-3);
        let r1 = errs[0].0 / errs[1].0;
        let r2 = errs[0].1 / errs[1].1;
        assert!((1.7..=2.3).contains(&r1), "{r1}");
        assert!((1.7..=2.3).contains(&r2), "{r2}");
    }

    #[test]
    fn collision_map_is_exactly_unital() {
        let (_, _, dd) = flat_davies();
        for dt in [1e-1, 1e-2, 1e-3] {
            let dp = build_dilation(&dd, dt, dt, 1).unwrap();
            assert!(unitality_defect(&dp) < 1e-12);
        }
        let dp = build_dilation(&dd, 1e-2, 1.0, 1).unwrap();
        let sz = diag_real(&[1.0, -1.0]);
        assert!(fro(&(dilation_markov(&dp, 0.0, &sz).unwrap() - sz)) == 0.0);
    }

    #[test]
    fn left_and_right_derivatives() {
        let (_, _, dd) = flat_davies();
        let dp = build_dilation(&dd, 1e-4, 1e-4, 1).unwrap();
        let chk = derivative_check(&dp).unwrap();
        assert!(chk.error() < 1e-3);
        let expected = dd.nu_star_nu() * c(-1.0, 0.0);
        assert!(op_norm(&(chk.asymmetry() - expected)) < 1e-3);
    }

    #[test]
    fn zren_is_conserved() {
        let (sys, _, dd) = flat_davies();
        let dp = build_dilation(&dd, 1e-3, 1.0, 1).unwrap();
        let z = RenormalizerZren::new(&sys, &dp);
        assert!(hermiticity_defect(&z.bin_operator(&dp.bin_basis)) == 0.0);
        assert!(z.commutator_defect(&dp) < 1e-12);
        let e1 = CVec::from_column_slice(&[c(0.0, 0.0), c(1.0, 0.0)]);
        let tests = vec![
            ZrenTestState { system: e1.clone(), quantum: None },
            ZrenTestState { system: e1.clone(), quantum: Some((300, 2)) },
            ZrenTestState { system: CVec::from_column_slice(&[c(1.0, 0.0), c(0.0, 0.0)]), quantum: Some((10, 0)) },
        ];
        assert!(zren_conservation(&dp, &z, 1.0, &tests).unwrap() < 1e-10);
    }

    #[test]
    fn wave_packet_fourier_pairs() {
        for p in [
            WavePacket::Gaussian { center: 0.3, width: 0.7, delay: 0.5 },
            WavePacket::Window { a: -1.0, b: 2.0 },
            WavePacket::Bump { center: 0.1, half_width: 1.5 },
        ] {
            let (lo, hi) = p.support();
            let mut norm = 0.0;
            panel_quadrature(lo, hi, 64, |x, w| norm += p.freq(x).norm_sqr() * w);
            assert!((norm - 1.0).abs() < 1e-6, "{p:?} {norm}");
            for tau in [-0.7, 0.0, 1.3] {
                let mut num = c(0.0, 0.0);
                panel_quadrature(lo, hi, 64, |x, w| num += p.freq(x) * Complex64::from_polar(w, -tau * x));
                num *= (2.0 * PI).powf(-0.5);
                assert!((num - p.time(tau)).norm() < 1e-8, "{p:?} at {tau}");
            }
        }
    }

    #[test]
    fn scaling_isometry_identities() {
        let (_, res, _) = flat_davies();
        let disc = crate::system_model::discretize_reservoir(&res, 400, crate::system_model::QuadratureRule::Gauss).unwrap();
        let g = AsymptoticVector::scalar(2, WavePacket::Bump { center: 0.2, half_width: 1.0 });
        for lambda in [0.5, 0.3] {
            let j = ScalingIsometry::new(&res, lambda);
            let v = j.embed(&disc, &g).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-6, "{}", v.norm());
        }
        let j = ScalingIsometry::new(&res, 0.5);
        let f = |y: f64| CVec::from_element(1, c(y.sin(), y));
        for y in [0.6, 1.0, 1.4] {
            let x = (y - 1.0) / 0.25;
            let back = j.push(&AsymptoticVector::scalar(2, WavePacket::Window { a: -1.0, b: 1.0 }), y);
            assert_eq!(back.len(), 1);
            let jjf = j.pull(2, f, x) * c(1.0 / 0.5, 0.0);
            assert!((jjf - f(y)).norm() < 1e-14);
        }
        assert!(j.pull(2, f, 2.5).norm() == 0.0);
        let wide = AsymptoticVector::scalar(2, WavePacket::Bump { center: 0.0, half_width: 3.0 });
        assert!(matches!(j.check_support(&wide), Err(DilationError::OutsideRange { .. })));
    }

    #[test]
    fn second_quantization_is_functorial() {
        let basis = FockBasis::new(3, 2).unwrap();
        let a = CMat::from_fn(3, 3, |i, j| c(0.1 * (i + 2 * j) as f64, 0.05 * i as f64));
        let b = CMat::from_fn(3, 3, |i, j| c(0.2 - 0.03 * (i * j) as f64, 0.01 * j as f64));
        let lhs = second_quantize(&basis, &a) * second_quantize(&basis, &b);
        let rhs = second_quantize(&basis, &(&a * &b));
        assert!(fro(&(lhs - rhs)) < 1e-12);
        let z = second_quantize(&basis, &zeros(3, 3));
        assert!((z[(0, 0)] - c(1.0, 0.0)).norm() == 0.0 && fro(&z) == 1.0);
        let scalar = second_quantize(&basis, &(eye(3) * c(0.5, 0.0)));
        for (i, occ) in basis.states.iter().enumerate() {
            let n: u32 = occ.iter().map(|&q| q as u32).sum();
            assert!((scalar[(i, i)] - c(0.5f64.powi(n as i32), 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn theta_rejects_non_contractions() {
        let (_, res, _) = flat_davies();
        let g: Arc<dyn Fn(f64) -> CMat + Send + Sync> = Arc::new(|_| eye(1));
        assert!(matches!(ThetaMap::new(eye(2), g, &res), Err(DilationError::NotContractive { .. })));
    }

    #[test]
    fn cascade_matches_continuum_series() {
        let (_, res, dd) = flat_davies();
        let offsets = res.noise_offsets();
        let dp = build_dilation(&dd, 1e-3, 1.0, 1).unwrap();
        let g = FieldState::One(AsymptoticVector::scalar(2, WavePacket::Gaussian { center: 0.0, width: 1.0, delay: 0.5 }));
        let h = FieldState::One(AsymptoticVector::scalar(2, WavePacket::Gaussian { center: 0.2, width: 0.8, delay: 0.4 }));
        for (o, i) in [(&FieldState::Vacuum, &FieldState::Vacuum), (&h, &FieldState::Vacuum), (&FieldState::Vacuum, &g), (&h, &g)] {
            let cascade = dilation_field_element(&dp, &offsets, 1.0, 0.0, o, i).unwrap();
            let series = field_element_series(&dd, &offsets, 1.0, 0.0, o, i, 24);
            assert!(op_norm(&(&cascade - &series)) < 5e-3, "{}", op_norm(&(cascade - series)));
        }
    }
}
