#![allow(dead_code)]

use wcl_core::linalg::{c, expm, CMat};
use wcl_core::model_file::{bundled_models, parse_model, ModelSpec};
use wcl_core::system_model::{
    bohr_frequencies, spectral_decompose, Profile, ReservoirModel, Segment, SegmentLabel, SmallSystem,
};

pub fn bundled() -> Vec<(&'static str, ModelSpec)> {
    bundled_models().iter().map(|(n, s)| (*n, parse_model(s).unwrap())).collect()
}

pub fn complex_matrix(d: usize, entries: &[(f64, f64)]) -> CMat {
    CMat::from_fn(d, d, |i, j| {
        let (re, im) = entries[(i * d + j) % entries.len()];
        c(re, im)
    })
}

/// `W diag(eigs) W*` with `W = exp(i(A + A*))`.
pub fn rotated_hamiltonian(eigs: &[f64], seed: &[(f64, f64)]) -> CMat {
    let d = eigs.len();
    let a = complex_matrix(d, seed);
    let w = expm(&((&a + a.adjoint()) * c(0.0, 1.0)));
    let diag = CMat::from_diagonal(&nalgebra::DVector::from_iterator(d, eigs.iter().map(|&e| c(e, 0.0))));
    &w * diag * w.adjoint()
}

/// Channels at every Bohr frequency with half-widths below half the smallest separation.
pub fn random_model(
    sys: &SmallSystem,
    coupling_seed: &[(f64, f64)],
    amplitude: f64,
    gaussian: bool,
) -> Option<ReservoirModel> {
    let bohr = bohr_frequencies(sys);
    let f = &bohr.frequencies;
    let min_sep = f.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if f.len() > 1 && min_sep < 0.1 {
        return None;
    }
    let half = if f.len() > 1 { 0.45 * min_sep } else { 0.5 };
    let d = sys.dim;
    let channels = f
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let shifted: Vec<(f64, f64)> = coupling_seed.iter().map(|&(a, b)| (a + 0.1 * i as f64, b)).collect();
            Segment {
                label: SegmentLabel::Bohr(w),
                interval: (w - half, w + half),
                multiplicity: 1,
                profile: if gaussian {
                    Profile::Gaussian { amplitude, center: w, width: 0.4 * half }
                } else {
                    Profile::Flat { amplitude }
                },
                coupling: complex_matrix(d, &shifted),
            }
        })
        .collect();
    ReservoirModel::new(sys, channels, vec![]).ok()
}

pub fn system(eigs: &[f64], seed: &[(f64, f64)]) -> SmallSystem {
    spectral_decompose(&rotated_hamiltonian(eigs, seed), 1e-9).unwrap()
}
