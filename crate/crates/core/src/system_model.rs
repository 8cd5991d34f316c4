//! Physical input data: the small-system Hamiltonian, the reservoir channels
//! attached to each Bohr frequency, their quadrature grids, and the rank-one
//! decomposition of the coupling used by the Dyson/Wick machinery.

use crate::linalg::{c, fro, hermitian_eigen, hermiticity_defect, zeros, CMat, CVec};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("hamiltonian is not Hermitian (relative asymmetry {defect:.3e})")]
    NonHermitian { defect: f64 },
    #[error("hamiltonian must be square and non-empty, got {rows}x{cols}")]
    BadShape { rows: usize, cols: usize },
    #[error("interval ({a}, {b}) is empty")]
    EmptyInterval { a: f64, b: f64 },
    #[error("channel interval ({a}, {b}) does not contain its Bohr frequency {omega}")]
    IntervalMissesFrequency { omega: f64, a: f64, b: f64 },
    #[error("reservoir intervals overlap: {first} and {second}")]
    OverlappingIntervals { first: String, second: String },
    #[error("channel frequency {omega} is not a Bohr frequency of the system")]
    NotABohrFrequency { omega: f64 },
    #[error("form factor of {segment} has shape {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    FormFactorShape { segment: String, rows: usize, cols: usize, expected_rows: usize, expected_cols: usize },
    #[error("form factor of channel {omega} is discontinuous at the Bohr frequency (jump {jump:.3e})")]
    Discontinuous { omega: f64, jump: f64 },
    #[error("invalid profile: {0}")]
    BadProfile(String),
    #[error("modes_per_channel must be at least 2, got {0}")]
    TooFewModes(usize),
    #[error("partition supports of omega = {first} and omega = {second} overlap")]
    PartitionOverlap { first: f64, second: f64 },
    #[error("partition support of omega = {omega} (half-width {width}) leaves its interval")]
    PartitionOutsideInterval { omega: f64, width: f64 },
    #[error("expected {expected} partition widths, got {got}")]
    PartitionCount { expected: usize, got: usize },
}

/// One eigenspace of `K`: energy, orthogonal projector and an orthonormal basis.
#[derive(Clone, Debug)]
pub struct Eigenspace {
    pub energy: f64,
    pub projector: CMat,
    pub basis: CMat,
}

#[derive(Clone, Debug)]
pub struct SmallSystem {
    pub dim: usize,
    pub hamiltonian: CMat,
    pub spectrum: Vec<Eigenspace>,
    pub cluster_tol: f64,
    /// Orthonormal eigenbasis `w_p` as columns, ordered by energy.
    pub eigenbasis: CMat,
    /// Clustered energy of each eigenbasis column.
    pub eigenvalues: Vec<f64>,
}

pub const DEFAULT_CLUSTER_TOL: f64 = 1e-9;
const HERMITIAN_TOL: f64 = 1e-12;

/// Spectral decomposition of a Hermitian `K` with eigenvalue clustering.
///
/// `cluster_tol` is relative to the spectral diameter.
pub fn spectral_decompose(k: &CMat, cluster_tol: f64) -> Result<SmallSystem, ModelError> {
    let (rows, cols) = k.shape();
    if rows != cols || rows == 0 {
        return Err(ModelError::BadShape { rows, cols });
    }
    let defect = hermiticity_defect(k);
    if defect > HERMITIAN_TOL {
        return Err(ModelError::NonHermitian { defect });
    }
    let (vals, vecs) = hermitian_eigen(k);
    let diameter = vals[rows - 1] - vals[0];
    let threshold = cluster_tol * diameter;

    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..rows {
        match groups.last_mut() {
            Some(g) if vals[i] - vals[*g.last().unwrap()] <= threshold => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let mut spectrum = Vec::with_capacity(groups.len());
    let mut eigenvalues = vec![0.0; rows];
    for g in &groups {
        let energy = g.iter().map(|&i| vals[i]).sum::<f64>() / g.len() as f64;
        let basis = CMat::from_fn(rows, g.len(), |r, col| vecs[(r, g[col])]);
        let projector = &basis * basis.adjoint();
        for &i in g {
            eigenvalues[i] = energy;
        }
        spectrum.push(Eigenspace { energy, projector, basis });
    }
    Ok(SmallSystem {
        dim: rows,
        hamiltonian: k.clone(),
        spectrum,
        cluster_tol,
        eigenbasis: vecs,
        eigenvalues,
    })
}

impl SmallSystem {
    pub fn energies(&self) -> Vec<f64> {
        self.spectrum.iter().map(|e| e.energy).collect()
    }

    /// Relative Frobenius residual of `K - Σ k P_k`.
    pub fn reconstruction_residual(&self) -> f64 {
        let mut acc = zeros(self.dim, self.dim);
        for e in &self.spectrum {
            acc += &e.projector * c(e.energy, 0.0);
        }
        fro(&(&self.hamiltonian - acc)) / fro(&self.hamiltonian).max(1.0)
    }

    /// Largest deviation from `P_k P_k' = δ P_k` and `Σ P_k = 1`.
    pub fn projector_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut sum = zeros(self.dim, self.dim);
        for (a, pa) in self.spectrum.iter().enumerate() {
            sum += &pa.projector;
            for (b, pb) in self.spectrum.iter().enumerate() {
                let prod = &pa.projector * &pb.projector;
                let target = if a == b { pa.projector.clone() } else { zeros(self.dim, self.dim) };
                worst = worst.max(fro(&(prod - target)));
            }
        }
        worst.max(fro(&(sum - CMat::identity(self.dim, self.dim))))
    }

    /// `e^{-i t K}`.
    pub fn free_propagator(&self, t: f64) -> CMat {
        let mut out = zeros(self.dim, self.dim);
        for e in &self.spectrum {
            out += &e.projector * Complex64::from_polar(1.0, -t * e.energy);
        }
        out
    }

    /// Absolute tolerance used to identify energies and frequencies.
    pub fn frequency_tolerance(&self) -> f64 {
        let e = self.energies();
        let diameter = e.last().unwrap() - e.first().unwrap();
        (self.cluster_tol * diameter).max(1e-12)
    }
}

/// Bohr frequencies with the eigenspace pairs `(k, k')`, `k - k' = ω`, behind each.
#[derive(Clone, Debug)]
pub struct BohrFrequencySet {
    pub frequencies: Vec<f64>,
    /// Indices into `SmallSystem::spectrum`.
    pub pair_map: Vec<Vec<(usize, usize)>>,
}

pub fn bohr_frequencies(sys: &SmallSystem) -> BohrFrequencySet {
    let energies = sys.energies();
    let tol = sys.frequency_tolerance();
    let mut diffs: Vec<(f64, usize, usize)> = Vec::new();
    for (a, ea) in energies.iter().enumerate() {
        for (b, eb) in energies.iter().enumerate() {
            diffs.push((ea - eb, a, b));
        }
    }
    diffs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut frequencies: Vec<f64> = Vec::new();
    let mut pair_map: Vec<Vec<(usize, usize)>> = Vec::new();
    for (w, a, b) in diffs {
        match frequencies.last() {
            Some(&last) if (w - last).abs() <= tol => pair_map.last_mut().unwrap().push((a, b)),
            _ => {
                frequencies.push(w);
                pair_map.push(vec![(a, b)]);
            }
        }
    }
    // Enforce exact negation symmetry.
    let n = frequencies.len();
    let sym: Vec<f64> = (0..n).map(|i| 0.5 * (frequencies[i] - frequencies[n - 1 - i])).collect();
    BohrFrequencySet { frequencies: sym, pair_map }
}

impl BohrFrequencySet {
    pub fn index_of(&self, omega: f64, tol: f64) -> Option<usize> {
        self.frequencies.iter().position(|&w| (w - omega).abs() <= tol)
    }
}

/// Scalar shape multiplying the coupling operator of a reservoir segment.
#[derive(Clone, Debug, PartialEq)]
pub enum Profile {
    Flat { amplitude: f64 },
    Lorentzian { amplitude: f64, center: f64, width: f64 },
    Gaussian { amplitude: f64, center: f64, width: f64 },
    /// Piecewise-linear interpolation of complex samples on increasing abscissae.
    Table { x: Vec<f64>, values: Vec<Complex64> },
}

impl Profile {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Profile::Lorentzian { width, .. } | Profile::Gaussian { width, .. } if *width <= 0.0 => {
                Err(ModelError::BadProfile(format!("width must be positive, got {width}")))
            }
            Profile::Table { x, values } => {
                if x.len() < 2 || x.len() != values.len() {
                    return Err(ModelError::BadProfile(format!(
                        "table needs at least two samples and matching lengths ({} abscissae, {} values)",
                        x.len(),
                        values.len()
                    )));
                }
                if x.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(ModelError::BadProfile("table abscissae must increase strictly".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: f64) -> Complex64 {
        match self {
            Profile::Flat { amplitude } => c(*amplitude, 0.0),
            Profile::Lorentzian { amplitude, center, width } => {
                let u = (x - center) / width;
                c(amplitude / (1.0 + u * u), 0.0)
            }
            Profile::Gaussian { amplitude, center, width } => {
                let u = (x - center) / width;
                c(amplitude * (-0.5 * u * u).exp(), 0.0)
            }
            Profile::Table { x: xs, values } => {
                if x <= xs[0] {
                    return values[0];
                }
                if x >= *xs.last().unwrap() {
                    return *values.last().unwrap();
                }
                let k = xs.partition_point(|&v| v <= x) - 1;
                let s = (x - xs[k]) / (xs[k + 1] - xs[k]);
                values[k] * (1.0 - s) + values[k + 1] * s
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SegmentLabel {
    Bohr(f64),
    Off,
}

impl std::fmt::Display for SegmentLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SegmentLabel::Bohr(w) => write!(f, "channel {w}"),
            SegmentLabel::Off => write!(f, "tail segment"),
        }
    }
}

/// A reservoir frequency interval with fiber `𝔥` of dimension `multiplicity`
/// and form factor `v(x) = profile(x) · coupling`.
///
/// `coupling` has shape `(d · multiplicity) × d`; row `k·m + μ` is system
/// level `k` tensored with fiber vector `μ`.
#[derive(Clone, Debug)]
pub struct Segment {
    pub label: SegmentLabel,
    pub interval: (f64, f64),
    pub multiplicity: usize,
    pub profile: Profile,
    pub coupling: CMat,
}

impl Segment {
    pub fn form_factor(&self, x: f64) -> CMat {
        &self.coupling * self.profile.eval(x)
    }

    pub fn width(&self) -> f64 {
        self.interval.1 - self.interval.0
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.interval.0 && x < self.interval.1
    }
}

#[derive(Clone, Debug)]
pub struct ReservoirModel {
    pub system_dim: usize,
    /// Resonant channels, sorted by Bohr frequency.
    pub channels: Vec<Segment>,
    /// Off-resonant segments away from every channel.
    pub tail: Vec<Segment>,
}

impl ReservoirModel {
    pub fn new(
        sys: &SmallSystem,
        mut channels: Vec<Segment>,
        tail: Vec<Segment>,
    ) -> Result<Self, ModelError> {
        let bohr = bohr_frequencies(sys);
        let tol = sys.frequency_tolerance();
        for ch in &mut channels {
            let SegmentLabel::Bohr(omega) = ch.label else {
                return Err(ModelError::BadProfile("channel without a Bohr frequency".into()));
            };
            let idx = bohr.index_of(omega, tol.max(1e-9)).ok_or(ModelError::NotABohrFrequency { omega })?;
            ch.label = SegmentLabel::Bohr(bohr.frequencies[idx]);
        }
        channels.sort_by(|a, b| a.interval.0.total_cmp(&b.interval.0));
        let all: Vec<&Segment> = channels.iter().chain(tail.iter()).collect();
        for seg in &all {
            let (a, b) = seg.interval;
            if !(b > a) {
                return Err(ModelError::EmptyInterval { a, b });
            }
            seg.profile.validate()?;
            let expected_rows = sys.dim * seg.multiplicity;
            if seg.coupling.nrows() != expected_rows || seg.coupling.ncols() != sys.dim {
                return Err(ModelError::FormFactorShape {
                    segment: seg.label.to_string(),
                    rows: seg.coupling.nrows(),
                    cols: seg.coupling.ncols(),
                    expected_rows,
                    expected_cols: sys.dim,
                });
            }
            if let SegmentLabel::Bohr(omega) = seg.label {
                if !seg.contains(omega) {
                    return Err(ModelError::IntervalMissesFrequency { omega, a, b });
                }
                let eps = 1e-7 * seg.width();
                let jump = fro(&(seg.form_factor(omega + eps) - seg.form_factor(omega - eps)));
                let scale = fro(&seg.form_factor(omega)).max(1.0);
                if jump > 1e-4 * scale {
                    return Err(ModelError::Discontinuous { omega, jump });
                }
            }
        }
        for (i, s) in all.iter().enumerate() {
            for t in all.iter().skip(i + 1) {
                if s.interval.0 < t.interval.1 && t.interval.0 < s.interval.1 {
                    return Err(ModelError::OverlappingIntervals {
                        first: format!("{} ({}, {})", s.label, s.interval.0, s.interval.1),
                        second: format!("{} ({}, {})", t.label, t.interval.0, t.interval.1),
                    });
                }
            }
        }
        Ok(Self { system_dim: sys.dim, channels, tail })
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.channels.iter().chain(self.tail.iter())
    }

    pub fn channel(&self, omega: f64, tol: f64) -> Option<&Segment> {
        self.channels
            .iter()
            .find(|ch| matches!(ch.label, SegmentLabel::Bohr(w) if (w - omega).abs() <= tol))
    }

    /// Total fiber dimension `dim 𝔥 = Σ_ω dim 𝔥_ω` over resonant channels.
    pub fn noise_dim(&self) -> usize {
        self.channels.iter().map(|c| c.multiplicity).sum()
    }

    /// Offset of each channel's fiber inside `𝔥 = ⊕_ω 𝔥_ω`.
    pub fn noise_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.channels
            .iter()
            .map(|ch| {
                let o = acc;
                acc += ch.multiplicity;
                o
            })
            .collect()
    }

    /// `⟨w_m ⊗ e_μ | v(x) w_p⟩` for each fiber index μ, zero outside every segment.
    pub fn matrix_element(&self, sys: &SmallSystem, target: usize, source: usize, x: f64) -> (Option<usize>, CVec) {
        for (s, seg) in self.segments().enumerate() {
            if seg.contains(x) {
                let v = seg.form_factor(x);
                let m = seg.multiplicity;
                let wm = sys.eigenbasis.column(target);
                let wp = sys.eigenbasis.column(source);
                let vp = &v * wp;
                let out = CVec::from_fn(m, |mu, _| {
                    (0..sys.dim).map(|k| wm[k].conj() * vp[k * m + mu]).sum::<Complex64>()
                });
                return (Some(s), out);
            }
        }
        (None, CVec::zeros(0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuadratureRule {
    Midpoint,
    Gauss,
}

impl std::str::FromStr for QuadratureRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "midpoint" => Ok(Self::Midpoint),
            "gauss" => Ok(Self::Gauss),
            other => Err(format!("unknown quadrature rule `{other}` (expected midpoint or gauss)")),
        }
    }
}

/// Nodes and weights of the chosen rule on `(a, b)`.
pub fn quadrature_nodes(rule: QuadratureRule, a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (b - a) / n as f64;
    match rule {
        QuadratureRule::Midpoint => ((0..n).map(|i| a + (i as f64 + 0.5) * h).collect(), vec![h; n]),
        QuadratureRule::Gauss => {
            let (x, w) = crate::linalg::gauss_legendre(n);
            let half = 0.5 * (b - a);
            (x.iter().map(|t| a + half * (t + 1.0)).collect(), w.iter().map(|w| w * half).collect())
        }
    }
}

/// A single reservoir mode: one quadrature node tensored with one fiber vector.
#[derive(Clone, Debug)]
pub struct Mode {
    pub frequency: f64,
    pub weight: f64,
    pub segment: usize,
    /// Index into `ReservoirModel::channels` for resonant modes.
    pub channel: Option<usize>,
    pub fiber: usize,
}

#[derive(Clone, Debug)]
pub struct DiscretizedReservoir {
    pub system_dim: usize,
    pub modes: Vec<Mode>,
    /// `√w_i (1 ⊗ ⟨μ_i|) v(x_i)`, a `d × d` matrix per mode.
    pub coupling: Vec<CMat>,
    pub rule: QuadratureRule,
    pub modes_per_channel: usize,
    /// Largest spacing between neighbouring nodes of one segment.
    pub max_spacing: f64,
}

pub fn discretize_reservoir(
    res: &ReservoirModel,
    modes_per_channel: usize,
    rule: QuadratureRule,
) -> Result<DiscretizedReservoir, ModelError> {
    if modes_per_channel < 2 {
        return Err(ModelError::TooFewModes(modes_per_channel));
    }
    let d = res.system_dim;
    let mut modes = Vec::new();
    let mut coupling = Vec::new();
    let mut max_spacing: f64 = 0.0;
    let n_channels = res.channels.len();
    for (s, seg) in res.segments().enumerate() {
        let (a, b) = seg.interval;
        if !(b > a) {
            return Err(ModelError::EmptyInterval { a, b });
        }
        let (xs, ws) = quadrature_nodes(rule, a, b, modes_per_channel);
        for pair in xs.windows(2) {
            max_spacing = max_spacing.max(pair[1] - pair[0]);
        }
        let m = seg.multiplicity;
        for (x, w) in xs.iter().zip(&ws) {
            let v = seg.form_factor(*x);
            for mu in 0..m {
                let block = CMat::from_fn(d, d, |k, l| v[(k * m + mu, l)] * w.sqrt());
                modes.push(Mode {
                    frequency: *x,
                    weight: *w,
                    segment: s,
                    channel: if s < n_channels { Some(s) } else { None },
                    fiber: mu,
                });
                coupling.push(block);
            }
        }
    }
    Ok(DiscretizedReservoir { system_dim: d, modes, coupling, rule, modes_per_channel, max_spacing })
}

impl DiscretizedReservoir {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.frequency).collect()
    }

    /// Quadrature of `f` over the nodes of one segment (fiber 0 only).
    pub fn integrate_segment(&self, segment: usize, f: impl Fn(f64) -> f64) -> f64 {
        self.modes
            .iter()
            .filter(|m| m.segment == segment && m.fiber == 0)
            .map(|m| m.weight * f(m.frequency))
            .sum()
    }

    /// Recurrence time `2π / Δx` of the grid.
    pub fn recurrence_time(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.max_spacing
    }

    /// Mode-space vector of a one-particle function `f(x, fiber)` sampled with `√w` weights.
    pub fn sample(&self, f: impl Fn(&Mode) -> Complex64) -> CVec {
        CVec::from_fn(self.len(), |i, _| f(&self.modes[i]) * self.modes[i].weight.sqrt())
    }

    /// `Σ_i V_i† e^{-iu(K + x_i)} V_i`, the reservoir-traced one-particle kernel at lag `u`.
    pub fn coupling_kernel(&self, sys: &SmallSystem, u: f64) -> CMat {
        let free = sys.free_propagator(u);
        let mut acc = zeros(self.system_dim, self.system_dim);
        for (mode, v) in self.modes.iter().zip(&self.coupling) {
            let phase = Complex64::from_polar(1.0, -u * mode.frequency);
            acc += v.adjoint() * &free * v * phase;
        }
        acc
    }
}

/// Smooth partition of unity: a C² bump per Bohr frequency plus the remainder `χ_∞`.
#[derive(Clone, Debug)]
pub struct PartitionOfUnity {
    pub centers: Vec<f64>,
    /// Support half-widths; each bump equals 1 on the inner half.
    pub widths: Vec<f64>,
}

fn smoothstep5(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

impl PartitionOfUnity {
    pub fn bump(&self, idx: usize, x: f64) -> f64 {
        let r = (x - self.centers[idx]).abs();
        let outer = self.widths[idx];
        let inner = 0.5 * outer;
        if r <= inner {
            1.0
        } else if r >= outer {
            0.0
        } else {
            1.0 - smoothstep5((r - inner) / (outer - inner))
        }
    }

    pub fn remainder(&self, x: f64) -> f64 {
        1.0 - (0..self.centers.len()).map(|i| self.bump(i, x)).sum::<f64>()
    }

    pub fn piece(&self, piece: Piece, x: f64) -> f64 {
        match piece {
            Piece::Bohr(i) => self.bump(i, x),
            Piece::Infinity => self.remainder(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Piece {
    /// Index into `BohrFrequencySet::frequencies`.
    Bohr(usize),
    Infinity,
}

/// `D_j ⊗ |φ_j⟩` with `D_j = |w_target⟩⟨w_source|`.
#[derive(Clone, Debug)]
pub struct CouplingTerm {
    pub target: usize,
    pub source: usize,
    pub piece: Piece,
    pub small: CMat,
    /// Grid vector in mode space.
    pub phi: CVec,
    /// `ω(j)`, absent for the off-resonant piece.
    pub omega: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CouplingDecomposition {
    pub terms: Vec<CouplingTerm>,
    pub partition: PartitionOfUnity,
    pub bohr: BohrFrequencySet,
    pub h_times: Vec<f64>,
    pub h_samples: Vec<f64>,
    sys: SmallSystem,
    res: ReservoirModel,
    frequencies: Vec<f64>,
}

/// Default support half-widths: 90% of the distance from ω to its interval edge.
pub fn default_partition_widths(res: &ReservoirModel, bohr: &BohrFrequencySet) -> Vec<f64> {
    bohr.frequencies
        .iter()
        .map(|&w| match res.channel(w, 1e-9) {
            Some(ch) => 0.9 * (w - ch.interval.0).min(ch.interval.1 - w),
            None => 0.0,
        })
        .collect()
}

pub fn decompose_coupling(
    sys: &SmallSystem,
    res: &ReservoirModel,
    disc: &DiscretizedReservoir,
    partition_widths: Option<&[f64]>,
) -> Result<CouplingDecomposition, ModelError> {
    let bohr = bohr_frequencies(sys);
    let widths = match partition_widths {
        Some(w) => w.to_vec(),
        None => default_partition_widths(res, &bohr),
    };
    if widths.len() != bohr.frequencies.len() {
        return Err(ModelError::PartitionCount { expected: bohr.frequencies.len(), got: widths.len() });
    }
    for (i, (&w, &half)) in bohr.frequencies.iter().zip(&widths).enumerate() {
        if half <= 0.0 {
            continue;
        }
        if let Some(ch) = res.channel(w, 1e-9) {
            if w - half <= ch.interval.0 || w + half >= ch.interval.1 {
                return Err(ModelError::PartitionOutsideInterval { omega: w, width: half });
            }
        }
        for (j, (&w2, &half2)) in bohr.frequencies.iter().zip(&widths).enumerate().skip(i + 1) {
            if half2 > 0.0 && (w2 - w).abs() < half + half2 {
                let _ = j;
                return Err(ModelError::PartitionOverlap { first: w, second: w2 });
            }
        }
    }
    let partition = PartitionOfUnity { centers: bohr.frequencies.clone(), widths };
    let d = sys.dim;
    let mut pieces: Vec<Piece> = (0..bohr.frequencies.len()).filter(|&i| partition.widths[i] > 0.0).map(Piece::Bohr).collect();
    pieces.push(Piece::Infinity);

    let mut terms = Vec::new();
    for target in 0..d {
        for source in 0..d {
            let wm = sys.eigenbasis.column(target).into_owned();
            let wp = sys.eigenbasis.column(source).into_owned();
            let base: Vec<Complex64> =
                disc.coupling.iter().map(|v| (wm.adjoint() * v * &wp)[(0, 0)]).collect();
            if base.iter().all(|z| z.norm() == 0.0) {
                continue;
            }
            for &piece in &pieces {
                let phi = CVec::from_fn(disc.len(), |i, _| base[i] * partition.piece(piece, disc.modes[i].frequency));
                if phi.iter().all(|z| z.norm() < 1e-300) {
                    continue;
                }
                let omega = match piece {
                    Piece::Bohr(i) => Some(bohr.frequencies[i]),
                    Piece::Infinity => None,
                };
                terms.push(CouplingTerm { target, source, piece, small: &wm * wp.adjoint(), phi, omega });
            }
        }
    }
    let mut out = CouplingDecomposition {
        terms,
        partition,
        bohr,
        h_times: Vec::new(),
        h_samples: Vec::new(),
        sys: sys.clone(),
        res: res.clone(),
        frequencies: disc.frequencies(),
    };
    let horizon = (0.5 * disc.recurrence_time()).min(64.0);
    out.tabulate_h(horizon, 2048);
    Ok(out)
}

impl CouplingDecomposition {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// `max_j ‖D_j‖`.
    pub fn max_small_norm(&self) -> f64 {
        self.terms.iter().map(|t| crate::linalg::op_norm(&t.small)).fold(0.0, f64::max)
    }

    /// `⟨φ_a | e^{-i u H_R} φ_b⟩` on the grid.
    pub fn correlation(&self, a: usize, b: usize, u: f64) -> Complex64 {
        let pa = &self.terms[a].phi;
        let pb = &self.terms[b].phi;
        self.frequencies
            .iter()
            .enumerate()
            .map(|(i, x)| pa[i].conj() * pb[i] * Complex64::from_polar(1.0, -u * x))
            .sum()
    }

    /// All `⟨φ_a | e^{-i u H_R} φ_b⟩`, row-major in `(a, b)`.
    pub fn correlation_matrix(&self, u: f64) -> Vec<Complex64> {
        let phase: Vec<Complex64> = self.frequencies.iter().map(|x| Complex64::from_polar(1.0, -u * x)).collect();
        let shifted: Vec<Vec<Complex64>> =
            self.terms.iter().map(|term| term.phi.iter().zip(&phase).map(|(p, e)| p * e).collect()).collect();
        let support: Vec<(usize, usize)> = self
            .terms
            .iter()
            .map(|term| {
                let lo = term.phi.iter().position(|z| z.norm() > 0.0).unwrap_or(0);
                let hi = term.phi.iter().rposition(|z| z.norm() > 0.0).map_or(0, |i| i + 1);
                (lo, hi)
            })
            .collect();
        let mut out = Vec::with_capacity(self.terms.len() * self.terms.len());
        for (a, &(alo, ahi)) in self.terms.iter().zip(&support) {
            for (b, &(blo, bhi)) in shifted.iter().zip(&support) {
                let (lo, hi) = (alo.max(blo), ahi.min(bhi));
                out.push(if lo < hi { (lo..hi).map(|i| a.phi[i].conj() * b[i]).sum() } else { Complex64::new(0.0, 0.0) });
            }
        }
        out
    }

    /// `h(t) = Σ_{j,j'} |⟨φ_j'| e^{-itH_R} φ_j⟩|`.
    pub fn h(&self, t: f64) -> f64 {
        self.correlation_matrix(t).iter().map(|z| z.norm()).sum()
    }

    pub fn tabulate_h(&mut self, horizon: f64, samples: usize) {
        use rayon::prelude::*;
        let dt = horizon / samples as f64;
        self.h_times = (0..=samples).map(|k| k as f64 * dt).collect();
        self.h_samples = self.h_times.par_iter().map(|&t| self.h(t)).collect();
    }

    /// Trapezoidal `∫_a^b h` over the tabulation (clamped to the tabulated range).
    pub fn h_integral(&self, a: f64, b: f64) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.h_times.len().saturating_sub(1) {
            let (t0, t1) = (self.h_times[k], self.h_times[k + 1]);
            let lo = t0.max(a);
            let hi = t1.min(b);
            if hi > lo {
                let f = |t: f64| {
                    let s = (t - t0) / (t1 - t0);
                    self.h_samples[k] * (1.0 - s) + self.h_samples[k + 1] * s
                };
                acc += 0.5 * (hi - lo) * (f(lo) + f(hi));
            }
        }
        acc
    }

    /// `∫_{-T}^{T} h(|s|) ds`, the finite-horizon stand-in for `‖h‖₁`.
    ///
    /// Computed directly from the grid when `T` exceeds the tabulated range.
    pub fn h_l1(&self, horizon: f64) -> f64 {
        let tab_end = *self.h_times.last().unwrap_or(&0.0);
        if horizon <= tab_end + 1e-12 {
            return 2.0 * self.h_integral(0.0, horizon);
        }
        let steps = ((horizon * 64.0).ceil() as usize).max(256);
        let dt = horizon / steps as f64;
        let mut acc = 0.5 * (self.h(0.0) + self.h(horizon));
        for k in 1..steps {
            acc += self.h(k as f64 * dt);
        }
        2.0 * acc * dt
    }

    /// Reassembly defect `max_i ‖V_i − Σ_j φ_j[i] D_j‖`.
    pub fn reassembly_error(&self, disc: &DiscretizedReservoir) -> f64 {
        let d = disc.system_dim;
        let mut worst: f64 = 0.0;
        for (i, v) in disc.coupling.iter().enumerate() {
            let mut acc = zeros(d, d);
            for t in &self.terms {
                acc += &t.small * t.phi[i];
            }
            worst = worst.max(fro(&(v - acc)));
        }
        worst
    }

    /// Continuum value `φ_j(x)` as a fiber vector (density, no quadrature weight).
    pub fn phi_at(&self, j: usize, x: f64) -> CVec {
        let t = &self.terms[j];
        let (seg, val) = self.res.matrix_element(&self.sys, t.target, t.source, x);
        match seg {
            Some(_) => val * c(self.partition.piece(t.piece, x), 0.0),
            None => CVec::zeros(0),
        }
    }

    /// Index of the channel carrying `x`, if any.
    pub fn channel_of(&self, x: f64) -> Option<usize> {
        self.res.channels.iter().position(|ch| ch.contains(x))
    }

    pub fn reservoir(&self) -> &ReservoirModel {
        &self.res
    }

    pub fn system(&self) -> &SmallSystem {
        &self.sys
    }
}
