//! End-to-end acceptance run. Prints one line per criterion and exits nonzero on any failure.

use std::cell::OnceCell;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use wcl_core::combinatorics::{enumerate_pairings, enumerate_partial_pairings};
use wcl_core::davies::{
    build_lindblad, choi_min_eigenvalue, compute_upsilon, evolve_semigroup, upsilon_method_gap, DaviesData, UpsilonMethod,
};
use wcl_core::dilation::*;
use wcl_core::fock::{
    correlation_chain, correlation_limit, dyson_wick_sum, reduced_dynamics, resummation_check, FockSimulation,
    FriedrichsSector,
};
use wcl_core::linalg::{c, diag_real, eye, op_norm, CMat, CVec};
use wcl_core::model_file::{bundled_models, parse_model, ModelSpec};
use wcl_core::system_model::{decompose_coupling, discretize_reservoir, QuadratureRule};

type Outcome = Result<(bool, String), String>;

struct Harness {
    failures: usize,
    total: Duration,
}

impl Harness {
    fn criterion(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        self.total += elapsed;
        let (pass, detail) = match result {
            Ok((pass, detail)) => (pass, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = elapsed <= budget;
        let ok = pass && in_time;
        if !ok {
            self.failures += 1;
        }
        let timing = format!("{:.2?} of {:?}", elapsed, budget);
        let timing = if in_time { timing } else { format!("{timing}, over budget") };
        println!("[{}] {name}: {detail} ({timing})", if ok { "PASS" } else { "FAIL" });
    }
}

fn models() -> Vec<(&'static str, ModelSpec)> {
    bundled_models().iter().map(|(n, s)| (*n, parse_model(s).unwrap())).collect()
}

fn flat() -> ModelSpec {
    parse_model(bundled_models()[0].1).unwrap()
}

fn davies(spec: &ModelSpec) -> Result<DaviesData, String> {
    compute_upsilon(&spec.system, &spec.reservoir, UpsilonMethod::plemelj()).map_err(|e| e.to_string())
}

fn sz() -> CMat {
    diag_real(&[1.0, -1.0])
}

fn decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0] || w[1] <= 1e-12)
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" > ")
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn main() -> ExitCode {
    let mut h = Harness { failures: 0, total: Duration::ZERO };

    h.criterion("dissipativity identity", secs(1), || {
        let mut worst: f64 = 0.0;
        for (_, spec) in models() {
            worst = worst.max(davies(&spec)?.dissipativity_residual);
        }
        Ok((worst <= 1e-8, format!("max residual {worst:.3e} <= 1e-8 over bundled models")))
    });

    h.criterion("level-shift cross-method agreement", secs(5), || {
        let mut worst: f64 = 0.0;
        for (_, spec) in models() {
            worst = worst.max(upsilon_method_gap(&spec.system, &spec.reservoir).map_err(err)?);
        }
        Ok((worst <= 1e-4, format!("max relative gap {worst:.3e} <= 1e-4")))
    });

    h.criterion("complete positivity", secs(1), || {
        let mut worst = f64::INFINITY;
        for (_, spec) in models() {
            let l = build_lindblad(&davies(&spec)?).map_err(err)?;
            for t in [0.1, 1.0, 10.0] {
                worst = worst.min(choi_min_eigenvalue(&l, t));
            }
        }
        Ok((worst >= -1e-10, format!("min Choi eigenvalue {worst:.3e} >= -1e-10")))
    });

    h.criterion("pairing counts", secs(1), || {
        let mut ok = true;
        let mut df = 1u64;
        for n in 0..=5usize {
            if n > 0 {
                df *= 2 * n as u64 - 1;
            }
            ok &= enumerate_pairings(n).map_err(err)?.len() as u64 == df;
        }
        let inv: Vec<usize> = (0..=5).map(|n| enumerate_partial_pairings(n).map(|v| v.len())).collect::<Result<_, _>>().map_err(err)?;
        ok &= inv == [1, 1, 2, 4, 10, 26];
        Ok((ok, format!("(2n-1)!! for n <= 5, involutions {inv:?}")))
    });

    let spec = flat();
    let sys = &spec.system;
    let res = &spec.reservoir;
    let dd = match davies(&spec) {
        Ok(dd) => dd,
        Err(e) => {
            println!("[FAIL] setup: {e}");
            return ExitCode::FAILURE;
        }
    };

    let small = discretize_reservoir(res, 4, QuadratureRule::Midpoint).unwrap();
    let dyson = OnceCell::new();
    let dyson_sum = || {
        dyson.get_or_init(|| {
            let dec = decompose_coupling(sys, res, &small, None).map_err(err)?;
            dyson_wick_sum(sys, &dec, 0.5, 0.5, 0.0, 2, 10).map_err(err)
        })
    };
    h.criterion("uniform Wick bound", secs(30), || {
        let dw = dyson_sum().as_ref().map_err(err)?;
        let norms: Vec<f64> = dw.terms.iter().map(op_norm).collect();
        let ok = norms.iter().zip(&dw.bounds).all(|(n, b)| *n <= *b);
        let detail = norms.iter().zip(&dw.bounds).map(|(n, b)| format!("{n:.3e} <= {b:.3e}")).collect::<Vec<_>>().join(", ");
        Ok((ok, format!("‖C_n‖ for n = 0..2: {detail}")))
    });

    h.criterion("Dyson/Wick sum against propagation", secs(60), || {
        let dw = dyson_sum().as_ref().map_err(err)?;
        let direct = reduced_dynamics(sys, &small, 0.5, 0.5, 0.0, 2).map_err(err)?;
        let gap = op_norm(&(direct - &dw.sum));
        Ok((gap <= dw.tail_bound, format!("gap {gap:.3e} <= order-3 tail {:.3e} at λ = 0.5, t = 0.5", dw.tail_bound)))
    });

    h.criterion("reduced dynamics converges to the semigroup", secs(120), || {
        let disc = discretize_reservoir(res, 24, QuadratureRule::Midpoint).map_err(err)?;
        let mut sups = Vec::new();
        for l in [0.5, 0.35, 0.25] {
            let sector = FriedrichsSector::new(sys, &disc, l);
            let mut sup: f64 = 0.0;
            for t in [0.25, 0.5, 1.0, 2.0] {
                sup = sup.max(op_norm(&(sector.reduced(t, 0.0).map_err(err)? - dd.contraction(t))));
            }
            sups.push(sup);
        }
        Ok((decreasing(&sups), format!("sup_t error over λ = 0.5, 0.35, 0.25: {}", list(&sups))))
    });

    h.criterion("correlation chain converges", secs(300), || {
        let times = [0.0, 0.5, 1.0];
        let ops = [sz()];
        let limit = correlation_limit(&dd.upsilon, &ops, &times);
        let mut errs = Vec::new();
        for l in [0.5, 0.3] {
            errs.push(op_norm(&(correlation_chain(sys, &small, l, &ops, &times, 2).map_err(err)? - &limit)));
        }
        Ok((decreasing(&errs), format!("one insertion of σ_z, λ = 0.5, 0.3: {}", list(&errs))))
    });

    h.criterion("dilation reproduces contraction and semigroup", secs(30), || {
        let l = build_lindblad(&dd).map_err(err)?;
        let mut errs = Vec::new();
        for dt in [2e-3, 1e-3] {
            let dp = build_dilation(&dd, dt, 1.0, 1).map_err(err)?;
            let a = op_norm(&(dilation_contraction(&dp, 1.0).map_err(err)? - dd.contraction(1.0)));
            let b = op_norm(&(dilation_markov(&dp, 1.0, &sz()).map_err(err)? - evolve_semigroup(&l, 1.0, &sz())));
            errs.push((a, b));
        }
        let (r1, r2) = (errs[0].0 / errs[1].0, errs[0].1 / errs[1].1);
        let ok = errs[1].0 <= 5e-3 && errs[1].1 <= 5e-3 && [r1, r2].iter().all(|r| (1.7..=2.3).contains(r));
        Ok((
            ok,
            format!(
                "errors at dt = 1e-3: {:.3e}, {:.3e} <= 5e-3; halving ratios {r1:.3}, {r2:.3} in [1.7, 2.3]",
                errs[1].0, errs[1].1
            ),
        ))
    });

    h.criterion("exact unitality", secs(1), || {
        let mut worst: f64 = 0.0;
        for dt in [1e-1, 1e-2, 1e-3, 1e-4] {
            worst = worst.max(unitality_defect(&build_dilation(&dd, dt, dt, 1).map_err(err)?));
        }
        Ok((worst <= 1e-12, format!("max ‖Φ(1) - 1‖ = {worst:.3e} <= 1e-12")))
    });

    let fine = discretize_reservoir(res, 400, QuadratureRule::Gauss).unwrap();
    let g = AsymptoticVector::scalar(2, WavePacket::Gaussian { center: 0.0, width: 1.0, delay: 0.0 });
    let hv = AsymptoticVector::scalar(2, WavePacket::Gaussian { center: 0.3, width: 0.8, delay: 0.2 });
    let tests = vec![
        FieldTest::One { out: g.clone(), inp: g.clone() },
        FieldTest::One { out: hv.clone(), inp: g.clone() },
        FieldTest::Two { out: [g.clone(), hv.clone()], inp: [g.clone(), hv.clone()] },
    ];

    h.criterion("annihilator convergence", secs(30), || {
        let dec = decompose_coupling(sys, res, &fine, None).map_err(err)?;
        let mut ok = true;
        let mut shown = Vec::new();
        for j in 0..dec.len() {
            let mut sups = Vec::new();
            for l in [0.5, 0.25, 0.125] {
                let mut sup: f64 = 0.0;
                for t in [0.0, 1.0, 10.0] {
                    let a = annihilator_limit(&dec, j, t, l, &g).map_err(err)?;
                    sup = sup.max(a.second.map_or(a.first.norm(), |s| (a.first - s).norm()));
                }
                sups.push(sup);
            }
            ok &= decreasing(&sups);
            if sups[0] > 1e-12 {
                shown.push(format!("term {j}: {}", list(&sups)));
            }
        }
        Ok((ok, shown.join("; ")))
    });

    h.criterion("free-dynamics limit", secs(60), || {
        let mut ok = true;
        let mut shown = Vec::new();
        for t in [0.0, 1.0] {
            let mut sups = Vec::new();
            for l in [0.5, 0.25] {
                let rows = free_dynamics_limit(sys, res, &fine, l, t, &tests).map_err(err)?;
                sups.push(rows.iter().map(|r| r.gap()).fold(0.0, f64::max));
            }
            ok &= decreasing(&sups);
            shown.push(format!("t = {t}: {}", list(&sups)));
        }
        Ok((ok, shown.join("; ")))
    });

    h.criterion("extended matrix elements", secs(600), || {
        let disc = discretize_reservoir(res, 16, QuadratureRule::Midpoint).map_err(err)?;
        let dp = build_dilation(&dd, 1e-3, 1.0, 1).map_err(err)?;
        let gs = FieldState::One(AsymptoticVector::scalar(2, WavePacket::Gaussian { center: 0.0, width: 0.5, delay: 0.5 }));
        let vac = FieldState::Vacuum;
        let mut vacuum = Vec::new();
        let mut one = vec![Vec::new(); 2];
        for l in [0.5, 0.3] {
            let sim = FockSimulation::new(sys, &disc, 2, l).map_err(err)?;
            vacuum.push(extended_wcl_matrix_element(&sim, res, &disc, &dp, 1.0, 0.0, &vac, &vac).map_err(err)?.gap());
            for (k, (o, i)) in [(&gs, &gs), (&gs, &vac)].into_iter().enumerate() {
                let base = extended_wcl_matrix_element(&sim, res, &disc, &dp, 0.0, 0.0, o, i).map_err(err)?.gap();
                let gap = extended_wcl_matrix_element(&sim, res, &disc, &dp, 1.0, 0.0, o, i).map_err(err)?.gap();
                one[k].push((gap - base).max(0.0));
            }
        }
        let ok = decreasing(&vacuum) && one.iter().all(|s| decreasing(s));
        Ok((
            ok,
            format!(
                "N = 16, λ = 0.5, 0.3: vacuum {}; ⟨g|·|g⟩ {}; ⟨g|·|Ω⟩ {} (baseline subtracted)",
                list(&vacuum),
                list(&one[0]),
                list(&one[1])
            ),
        ))
    });

    h.criterion("Θ compression", secs(60), || {
        let bump: Arc<dyn Fn(f64) -> CMat + Send + Sync> = Arc::new(|x: f64| eye(1) * c(0.5 * (-(x - 1.0) * (x - 1.0)).exp(), 0.0));
        let theta = ThetaMap::new(eye(2), bump, res).map_err(err)?;
        let mut sups = Vec::new();
        for l in [0.5, 0.25] {
            let rows = theta_compression(res, &fine, l, &theta, &tests).map_err(err)?;
            sups.push(rows.iter().map(|r| r.gap()).fold(0.0, f64::max));
        }
        Ok((decreasing(&sups), format!("max gap over λ = 0.5, 0.25: {}", list(&sups))))
    });

    h.criterion("renormalized energy conservation", secs(10), || {
        let dp = build_dilation(&dd, 1e-3, 1.0, 1).map_err(err)?;
        let z = RenormalizerZren::new(sys, &dp);
        let e0 = CVec::from_column_slice(&[c(1.0, 0.0), c(0.0, 0.0)]);
        let e1 = CVec::from_column_slice(&[c(0.0, 0.0), c(1.0, 0.0)]);
        let tests = vec![
            ZrenTestState { system: e1.clone(), quantum: None },
            ZrenTestState { system: e1, quantum: Some((300, 2)) },
            ZrenTestState { system: e0, quantum: Some((10, 0)) },
        ];
        let defect = zren_conservation(&dp, &z, 1.0, &tests).map_err(err)?;
        Ok((defect <= 1e-10, format!("expectation defect {defect:.3e} <= 1e-10")))
    });

    h.criterion("resummation identity", secs(120), || {
        let disc = discretize_reservoir(res, 2, QuadratureRule::Midpoint).map_err(err)?;
        let dec = decompose_coupling(sys, res, &disc, None).map_err(err)?;
        let f_in = CVec::from_fn(disc.len(), |i, _| c(1.0 + i as f64, 0.5)).normalize();
        let f_out = CVec::from_fn(disc.len(), |i, _| c(0.3, 1.0 - 0.2 * i as f64)).normalize();
        let chk = resummation_check(sys, &dec, &disc, 0.3, 1.0, 0.0, 2, 2, &f_in, &f_out, 16).map_err(err)?;
        Ok((
            chk.residual <= chk.tail_bound,
            format!("residual {:.3e} <= order-3 tail {:.3e} at λ = 0.3, t = 1", chk.residual, chk.tail_bound),
        ))
    });

    let budget = h.total + secs(60);
    h.criterion("deterministic reruns", budget.max(secs(1200)), || {
        let tmp = tempfile::tempdir().map_err(err)?;
        let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
        let mut compared = 0;
        for (sub, file, csv) in [
            ("wcl-sweep", "wcl_sweep.toml", "wcl_sweep.csv"),
            ("resummation-check", "resummation_check.toml", "resummation_check.csv"),
            ("dilation-check", "dilation_check.toml", "dilation_check.csv"),
        ] {
            let mut outputs = Vec::new();
            for (k, jobs) in ["1", "4"].iter().enumerate() {
                let dir = tmp.path().join(format!("{sub}-{k}"));
                let status = Command::new(env!("CARGO_BIN_EXE_wcl-lab"))
                    .args([sub, "--deterministic", "--jobs", jobs, "--config"])
                    .arg(format!("{root}/{file}"))
                    .arg("--out")
                    .arg(&dir)
                    .output()
                    .map_err(err)?;
                if status.status.code() != Some(0) {
                    return Ok((false, format!("{sub} exited with {:?}", status.status.code())));
                }
                outputs.push(std::fs::read(dir.join(csv)).map_err(err)?);
            }
            if outputs[0] != outputs[1] {
                return Ok((false, format!("{csv} differs between runs")));
            }
            compared += 1;
        }
        Ok((true, format!("{compared} experiments byte-identical across reruns with 1 and 4 workers")))
    });

    println!("{} failure(s), {:.1?} total", h.failures, h.total);
    if h.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
