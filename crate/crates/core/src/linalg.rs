//! Dense complex linear algebra helpers shared by every module.
//!
//! Vectorization is column-stacking throughout: `vec(S)[i + j*d] = S[i, j]`,
//! so that `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn zeros(r: usize, c: usize) -> CMat {
    CMat::zeros(r, c)
}

pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn diag_real(values: &[f64]) -> CMat {
    let n = values.len();
    CMat::from_fn(n, n, |i, j| if i == j { c(values[i], 0.0) } else { c(0.0, 0.0) })
}

/// Frobenius norm.
pub fn fro(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Spectral (operator 2-) norm.
pub fn op_norm(a: &CMat) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    // Largest eigenvalue of the smaller Gram matrix.
    let g = if a.nrows() >= a.ncols() { a.adjoint() * a } else { a * a.adjoint() };
    let (vals, _) = hermitian_eigen(&g);
    vals.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Relative Frobenius distance of `a` from its adjoint.
pub fn hermiticity_defect(a: &CMat) -> f64 {
    let scale = fro(a).max(1.0);
    fro(&(a - a.adjoint())) / scale
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    CMat::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

pub fn vectorize(s: &CMat) -> CVec {
    CVec::from_column_slice(s.as_slice())
}

pub fn unvectorize(v: &CVec, d: usize) -> CMat {
    CMat::from_column_slice(d, d, v.as_slice())
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
///
/// The input is symmetrized first so that round-off asymmetry does not leak
/// into the eigenvectors.
pub fn hermitian_eigen(h: &CMat) -> (Vec<f64>, CMat) {
    let n = h.nrows();
    if n == 0 {
        return (Vec::new(), zeros(0, 0));
    }
    let sym = (h + h.adjoint()) * c(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = CMat::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

pub fn min_eigenvalue_hermitian(h: &CMat) -> f64 {
    hermitian_eigen(h).0.first().copied().unwrap_or(0.0)
}

/// Spectral representation of a Hermitian matrix, reusable for many times.
#[derive(Clone, Debug)]
pub struct HermitianSpectrum {
    pub values: Vec<f64>,
    pub vectors: CMat,
}

impl HermitianSpectrum {
    pub fn new(h: &CMat) -> Self {
        let (values, vectors) = hermitian_eigen(h);
        Self { values, vectors }
    }

    /// `exp(-i t H)`.
    pub fn propagator(&self, t: f64) -> CMat {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let phase = Complex64::from_polar(1.0, -t * self.values[j]);
            for i in 0..n {
                scaled[(i, j)] *= phase;
            }
        }
        scaled * self.vectors.adjoint()
    }

    /// `exp(-i t H) psi` without forming the full propagator.
    pub fn apply(&self, t: f64, psi: &CVec) -> CVec {
        let mut coeff = self.vectors.adjoint() * psi;
        for (k, z) in coeff.iter_mut().enumerate() {
            *z *= Complex64::from_polar(1.0, -t * self.values[k]);
        }
        &self.vectors * coeff
    }
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
// Backward-error thresholds for unit roundoff in double precision.
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: &CMat) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn scale(a: &CMat, s: f64) -> CMat {
    a * c(s, 0.0)
}

/// Matrix exponential by scaling and squaring with a diagonal Padé approximant.
pub fn expm(a: &CMat) -> CMat {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    if n == 0 {
        return zeros(0, 0);
    }
    let id = eye(n);
    let norm = one_norm(a);
    for &(m, theta) in THETA.iter() {
        if norm <= theta {
            return pade_low(a, m, &id);
        }
    }
    let s = if norm > THETA13 { (norm / THETA13).log2().ceil().max(0.0) as i32 } else { 0 };
    let a_s = scale(a, 0.5f64.powi(s));
    let b = &PADE13;
    let a2 = &a_s * &a_s;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = scale(&a6, b[13]) + scale(&a4, b[11]) + scale(&a2, b[9]);
    let u = &a_s
        * (&a6 * u_inner + scale(&a6, b[7]) + scale(&a4, b[5]) + scale(&a2, b[3]) + scale(&id, b[1]));
    let v_inner = scale(&a6, b[12]) + scale(&a4, b[10]) + scale(&a2, b[8]);
    let v = &a6 * v_inner + scale(&a6, b[6]) + scale(&a4, b[4]) + scale(&a2, b[2]) + scale(&id, b[0]);
    let mut r = solve_pade(&u, &v);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

fn pade_low(a: &CMat, m: usize, id: &CMat) -> CMat {
    let b: &[f64] = match m {
        3 => &PADE3,
        5 => &PADE5,
        7 => &PADE7,
        _ => &PADE9,
    };
    let a2 = a * a;
    let mut even_pow = id.clone();
    let mut u_acc = zeros(a.nrows(), a.ncols());
    let mut v_acc = zeros(a.nrows(), a.ncols());
    let mut k = 0;
    while 2 * k < m {
        u_acc += scale(&even_pow, b[2 * k + 1]);
        v_acc += scale(&even_pow, b[2 * k]);
        even_pow = &even_pow * &a2;
        k += 1;
    }
    let u = a * u_acc;
    solve_pade(&u, &v_acc)
}

fn solve_pade(u: &CMat, v: &CMat) -> CMat {
    let p = v + u;
    let q = v - u;
    q.lu().solve(&p).expect("Padé denominator is singular")
}

/// Unitary propagator `exp(-i t H)` for a Hermitian `H`, by eigendecomposition.
pub fn unitary_propagator(h: &CMat, t: f64) -> CMat {
    HermitianSpectrum::new(h).propagator(t)
}

/// `exp(-i t A)` for a general square matrix.
pub fn expm_minus_i(a: &CMat, t: f64) -> CMat {
    expm(&(a * c(0.0, -t)))
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Newton on the Legendre recurrence).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            if n == 0 {
                break;
            }
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> CMat {
        CMat::from_fn(n, n, |_, _| c(rng.gen_range(-1.0..1.0) * scale, rng.gen_range(-1.0..1.0) * scale))
    }

    #[test]
    fn expm_matches_eigendecomposition_for_hermitian_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &s in &[0.001, 0.1, 1.0, 7.0, 40.0] {
            let a = random_matrix(6, &mut rng, s);
            let h = &a + a.adjoint();
            let via_pade = expm(&(&h * c(0.0, -1.0)));
            let via_eig = unitary_propagator(&h, 1.0);
            assert!(fro(&(via_pade - via_eig)) < 1e-10 * (1.0 + s));
        }
    }

    #[test]
    fn expm_of_nilpotent_is_finite_series() {
        let mut a = zeros(3, 3);
        a[(0, 1)] = c(2.0, 0.0);
        a[(1, 2)] = c(0.0, 3.0);
        let e = expm(&a);
        let expected = eye(3) + &a + &a * &a * c(0.5, 0.0);
        assert!(fro(&(e - expected)) < 1e-13);
    }

    #[test]
    fn expm_scalar_case() {
        let a = CMat::from_element(1, 1, c(-3.0, 2.0));
        let e = expm(&a)[(0, 0)];
        let expected = c(-3.0, 2.0).exp();
        assert_relative_eq!(e.re, expected.re, epsilon = 1e-14);
        assert_relative_eq!(e.im, expected.im, epsilon = 1e-14);
    }

    #[test]
    fn kron_and_vec_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(3, &mut rng, 1.0);
        let x = random_matrix(3, &mut rng, 1.0);
        let b = random_matrix(3, &mut rng, 1.0);
        let lhs = vectorize(&(&a * &x * &b));
        let rhs = kron(&b.transpose(), &a) * vectorize(&x);
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(5);
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert_relative_eq!(integral, 2.0 / 9.0, epsilon = 1e-14);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn op_norm_of_diagonal() {
        let d = diag_real(&[1.0, -4.0, 2.5]);
        assert_relative_eq!(op_norm(&d), 4.0, epsilon = 1e-12);
    }
}
