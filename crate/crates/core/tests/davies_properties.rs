mod common;

use common::*;
use proptest::prelude::*;
use wcl_core::davies::{
    build_lindblad, choi_min_eigenvalue, compute_upsilon, upsilon_method_gap, LindbladGenerator, UpsilonMethod,
};
use wcl_core::linalg::{fro, op_norm};

fn pair() -> impl Strategy<Value = (f64, f64)> {
    (-1.0..1.0f64, -1.0..1.0f64)
}

fn check_generator(sys: &wcl_core::system_model::SmallSystem, res: &wcl_core::system_model::ReservoirModel) {
    let dd = compute_upsilon(sys, res, UpsilonMethod::plemelj()).unwrap();
    assert!(dd.dissipativity_residual <= 1e-8, "{}", dd.dissipativity_residual);
    for t in [0.1, 1.0, 10.0] {
        assert!(op_norm(&dd.contraction(t)) <= 1.0 + 1e-10);
    }
    let l = build_lindblad(&dd).unwrap();
    let free = LindbladGenerator::free_generator(&sys.hamiltonian);
    let comm = &l.superoperator * &free - &free * &l.superoperator;
    assert!(fro(&comm) <= 1e-8, "{}", fro(&comm));
    for t in [0.1, 1.0, 10.0] {
        assert!(choi_min_eigenvalue(&l, t) >= -1e-10);
    }
}

#[test]
fn bundled_generators_are_valid() {
    for (name, spec) in bundled() {
        check_generator(&spec.system, &spec.reservoir);
        let gap = upsilon_method_gap(&spec.system, &spec.reservoir).unwrap();
        assert!(gap <= 1e-4, "{name}: {gap}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_generators_are_valid(
        gaps in prop::collection::vec(0.4..1.5f64, 1..3),
        seed in prop::collection::vec(pair(), 4..16),
        cseed in prop::collection::vec(pair(), 4..16),
        amp in 0.05..0.3f64,
        gaussian in any::<bool>(),
    ) {
        let mut eigs = vec![0.0];
        for g in gaps {
            eigs.push(eigs.last().unwrap() + g);
        }
        let sys = system(&eigs, &seed);
        let Some(res) = random_model(&sys, &cseed, amp, gaussian) else { return Ok(()); };
        check_generator(&sys, &res);
    }
}
