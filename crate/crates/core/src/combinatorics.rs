//! Wick pairings, partial pairings and quadrature on ordered time simplices.

use thiserror::Error;

pub const MAX_PAIRING_N: usize = 7;
pub const MAX_PARTIAL_N: usize = 10;
pub const MAX_SIMPLEX_DIM: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CombinatoricsError {
    #[error("n = {n} exceeds the enumeration guard {max}")]
    TooLarge { n: usize, max: usize },
    #[error("degenerate interval [{a}, {b}]")]
    DegenerateInterval { a: f64, b: f64 },
    #[error("points_per_axis must be positive")]
    NoPoints,
}

/// A pairing of `{0, …, 2n−1}` stored as `σ` with pairs `(σ[2p], σ[2p+1])`.
///
/// Canonical form: `σ[2p] < σ[2p+1]` and `σ[2p] < σ[2p+2]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pairing {
    pub sigma: Vec<usize>,
}

impl Pairing {
    pub fn n(&self) -> usize {
        self.sigma.len() / 2
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sigma.chunks(2).map(|c| (c[0], c[1]))
    }

    pub fn is_canonical(&self) -> bool {
        let s = &self.sigma;
        let mut seen = vec![false; s.len()];
        for &v in s {
            if v >= s.len() || seen[v] {
                return false;
            }
            seen[v] = true;
        }
        (0..self.n()).all(|p| s[2 * p] < s[2 * p + 1] && (p + 1 == self.n() || s[2 * p] < s[2 * p + 2]))
    }

    /// Letters per slot, one letter per pair: `(0,2)(1,3)` becomes `abab`.
    pub fn to_bracket_string(&self) -> String {
        let mut out = vec!['?'; self.sigma.len()];
        for (p, (a, b)) in self.pairs().enumerate() {
            let ch = (b'a' + (p % 26) as u8) as char;
            out[a] = ch;
            out[b] = ch;
        }
        out.into_iter().collect()
    }
}

/// True iff every pair joins neighbouring slots, i.e. `σ` is the identity.
pub fn is_time_consecutive(p: &Pairing) -> bool {
    p.sigma.iter().enumerate().all(|(i, &v)| i == v)
}

pub fn enumerate_pairings(n: usize) -> Result<Vec<Pairing>, CombinatoricsError> {
    if n > MAX_PAIRING_N {
        return Err(CombinatoricsError::TooLarge { n, max: MAX_PAIRING_N });
    }
    let mut out = Vec::new();
    let mut used = vec![false; 2 * n];
    let mut sigma = Vec::with_capacity(2 * n);
    pair_rec(&mut used, &mut sigma, &mut out);
    Ok(out)
}

fn pair_rec(used: &mut [bool], sigma: &mut Vec<usize>, out: &mut Vec<Pairing>) {
    let Some(first) = used.iter().position(|u| !u) else {
        out.push(Pairing { sigma: sigma.clone() });
        return;
    };
    used[first] = true;
    for partner in first + 1..used.len() {
        if used[partner] {
            continue;
        }
        used[partner] = true;
        sigma.push(first);
        sigma.push(partner);
        pair_rec(used, sigma, out);
        sigma.truncate(sigma.len() - 2);
        used[partner] = false;
    }
    used[first] = false;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Minus,
    Plus,
}

/// Pairs inside `{0, …, n−1}`; slots outside `Ran σ` stay unpaired.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialPairing {
    pub n: usize,
    pub sigma: Vec<usize>,
}

impl PartialPairing {
    pub fn pair_count(&self) -> usize {
        self.sigma.len() / 2
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sigma.chunks(2).map(|c| (c[0], c[1]))
    }

    pub fn unpaired(&self) -> Vec<usize> {
        (0..self.n).filter(|i| !self.sigma.contains(i)).collect()
    }

    /// The forced signs on paired slots: `−` on the opening slot, `+` on the closing one.
    pub fn compatible_signs(&self) -> Vec<Option<Sign>> {
        let mut out = vec![None; self.n];
        for (a, b) in self.pairs() {
            out[a] = Some(Sign::Minus);
            out[b] = Some(Sign::Plus);
        }
        out
    }

    pub fn is_canonical(&self) -> bool {
        let s = &self.sigma;
        let p = self.pair_count();
        let mut seen = vec![false; self.n];
        for &v in s {
            if v >= self.n || seen[v] {
                return false;
            }
            seen[v] = true;
        }
        (0..p).all(|i| s[2 * i] < s[2 * i + 1] && (i + 1 == p || s[2 * i] < s[2 * i + 2]))
    }
}

pub fn enumerate_partial_pairings(n: usize) -> Result<Vec<PartialPairing>, CombinatoricsError> {
    if n > MAX_PARTIAL_N {
        return Err(CombinatoricsError::TooLarge { n, max: MAX_PARTIAL_N });
    }
    let mut out = Vec::new();
    let mut used = vec![false; n];
    let mut sigma = Vec::new();
    partial_rec(0, &mut used, &mut sigma, &mut out);
    Ok(out)
}

fn partial_rec(from: usize, used: &mut [bool], sigma: &mut Vec<usize>, out: &mut Vec<PartialPairing>) {
    let n = used.len();
    let Some(first) = (from..n).find(|&i| !used[i]) else {
        out.push(PartialPairing { n, sigma: sigma.clone() });
        return;
    };
    // `first` stays unpaired.
    partial_rec(first + 1, used, sigma, out);
    used[first] = true;
    for partner in first + 1..n {
        if used[partner] {
            continue;
        }
        used[partner] = true;
        sigma.push(first);
        sigma.push(partner);
        partial_rec(first + 1, used, sigma, out);
        sigma.truncate(sigma.len() - 2);
        used[partner] = false;
    }
    used[first] = false;
}

/// `(2n − 1)!!`.
pub fn double_factorial_odd(n: usize) -> u64 {
    (1..=n as u64).map(|k| 2 * k - 1).product()
}

/// Involution numbers `I(n) = I(n−1) + (n−1) I(n−2)`.
pub fn involution_number(n: usize) -> u64 {
    let (mut a, mut b) = (1u64, 1u64);
    for k in 2..=n {
        let next = b + (k as u64 - 1) * a;
        a = b;
        b = next;
    }
    if n == 0 {
        1
    } else {
        b
    }
}

/// Tensor Gauss rule mapped onto `a < t₁ < … < t_n < b`.
#[derive(Clone, Debug)]
pub struct SimplexRule {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl SimplexRule {
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(t, w)| w * f(t)).sum()
    }
}

pub fn simplex_quadrature(n: usize, a: f64, b: f64, points_per_axis: usize) -> Result<SimplexRule, CombinatoricsError> {
    if n > MAX_SIMPLEX_DIM {
        return Err(CombinatoricsError::TooLarge { n, max: MAX_SIMPLEX_DIM });
    }
    if !(b > a) {
        return Err(CombinatoricsError::DegenerateInterval { a, b });
    }
    if points_per_axis == 0 {
        return Err(CombinatoricsError::NoPoints);
    }
    let (gx, gw) = crate::linalg::gauss_legendre(points_per_axis);
    let y: Vec<f64> = gx.iter().map(|x| 0.5 * (x + 1.0)).collect();
    let wy: Vec<f64> = gw.iter().map(|w| 0.5 * w).collect();
    let total = points_per_axis.pow(n as u32);
    let mut nodes = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        let mut t = vec![0.0; n];
        let mut w = 1.0;
        let mut upper = b;
        for k in (0..n).rev() {
            w *= wy[idx[k]] * (upper - a);
            t[k] = a + (upper - a) * y[idx[k]];
            upper = t[k];
        }
        nodes.push(t);
        weights.push(w);
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < points_per_axis {
                break;
            }
            *slot = 0;
        }
    }
    Ok(SimplexRule { n, a, b, nodes, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn small_pairing_counts() {
        assert_eq!(enumerate_pairings(0).unwrap().len(), 1);
        assert_eq!(enumerate_pairings(1).unwrap().len(), 1);
        assert_eq!(enumerate_pairings(2).unwrap().len(), 3);
        assert_eq!(enumerate_pairings(3).unwrap().len(), 15);
    }

    #[test]
    fn exactly_one_time_consecutive_pairing() {
        for n in 1..=4 {
            let all = enumerate_pairings(n).unwrap();
            assert_eq!(all.iter().filter(|p| is_time_consecutive(p)).count(), 1);
        }
    }

    #[test]
    fn crossing_pairing_is_not_consecutive() {
        let p = Pairing { sigma: vec![0, 2, 1, 3] };
        assert!(p.is_canonical());
        assert!(!is_time_consecutive(&p));
        assert_eq!(p.to_bracket_string(), "abab");
        assert!(is_time_consecutive(&Pairing { sigma: vec![0, 1, 2, 3] }));
    }

    #[test]
    fn guards_reject_large_n() {
        assert!(enumerate_pairings(8).is_err());
        assert!(enumerate_partial_pairings(11).is_err());
        assert!(simplex_quadrature(6, 0.0, 1.0, 2).is_err());
        assert!(simplex_quadrature(2, 1.0, 1.0, 2).is_err());
    }

    #[test]
    fn partial_pairings_of_four_match_brute_force() {
        // Oracle: count involutions of {0..3} by scanning all maps.
        let mut brute = 0;
        for code in 0..4usize.pow(4) {
            let f: Vec<usize> = (0..4).map(|i| (code / 4usize.pow(i)) % 4).collect();
            if (0..4).all(|i| f[f[i]] == i) {
                brute += 1;
            }
        }
        let all = enumerate_partial_pairings(4).unwrap();
        assert_eq!(brute, 10);
        assert_eq!(all.len(), brute);
        assert_eq!(enumerate_partial_pairings(0).unwrap().len(), 1);
        assert_eq!(enumerate_partial_pairings(2).unwrap().len(), 2);
    }

    #[test]
    fn compatible_signs_mark_pair_ends() {
        let p = PartialPairing { n: 3, sigma: vec![0, 2] };
        assert_eq!(p.compatible_signs(), vec![Some(Sign::Minus), None, Some(Sign::Plus)]);
        assert_eq!(p.unpaired(), vec![1]);
    }

    #[test]
    fn simplex_volumes() {
        let r = simplex_quadrature(1, 0.0, 2.0, 3).unwrap();
        assert!((r.integrate(|t| t[0] * t[0]) - 8.0 / 3.0).abs() < 1e-13);
        let r = simplex_quadrature(2, 0.0, 1.0, 2).unwrap();
        assert!((r.weights.iter().sum::<f64>() - 0.5).abs() < 1e-14);
        for t in &r.nodes {
            assert!(0.0 < t[0] && t[0] < t[1] && t[1] < 1.0);
        }
    }

    #[test]
    fn triple_product_matches_monte_carlo() {
        let r = simplex_quadrature(3, 0.0, 1.0, 4).unwrap();
        let exact_rule = r.integrate(|t| t[0] * t[1] * t[2]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let samples = 400_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..samples {
            let mut t: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            t.sort_by(f64::total_cmp);
            // Ordered triples fill 1/6 of the cube.
            let v = t[0] * t[1] * t[2] / 6.0;
            sum += v;
            sum2 += v * v;
        }
        let mean = sum / samples as f64;
        let sigma = ((sum2 / samples as f64 - mean * mean) / samples as f64).sqrt();
        assert!((exact_rule - mean).abs() < 3.0 * sigma, "rule {exact_rule} mc {mean} ± {sigma}");
        assert!((exact_rule - 1.0 / 48.0).abs() < 1e-13);
    }
}
