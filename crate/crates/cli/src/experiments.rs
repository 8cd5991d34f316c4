use std::sync::Arc;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use wcl_core::combinatorics::{double_factorial_odd, enumerate_pairings, enumerate_partial_pairings, involution_number};
use wcl_core::davies::{
    build_lindblad, choi_min_eigenvalue, compute_upsilon, evolve_semigroup, upsilon_method_gap, DaviesData,
    UpsilonMethod,
};
use wcl_core::dilation::*;
use wcl_core::fock::{correlation_chain, correlation_limit, resummation_check, FockSimulation, FriedrichsSector};
use wcl_core::linalg::{c, fro, hermiticity_defect, op_norm, CMat, CVec};
use wcl_core::model_file::ModelSpec;
use wcl_core::system_model::{
    decompose_coupling, discretize_reservoir, DiscretizedReservoir, QuadratureRule, SegmentLabel,
};

use crate::config::RunConfig;
use crate::report::{Check, Outcome, Table};
use crate::row;

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub model: &'a ModelSpec,
    pub brackets: bool,
}

impl Ctx<'_> {
    fn davies(&self) -> Result<DaviesData> {
        Ok(compute_upsilon(&self.model.system, &self.model.reservoir, UpsilonMethod::plemelj())?)
    }

    fn grid(&self, n: usize) -> Result<DiscretizedReservoir> {
        Ok(discretize_reservoir(&self.model.reservoir, n, self.model.discretization.rule)?)
    }

    fn fine_grid(&self) -> Result<DiscretizedReservoir> {
        Ok(discretize_reservoir(&self.model.reservoir, self.cfg.options.fine_modes, QuadratureRule::Gauss)?)
    }

    /// `W diag(1, −1, 1, …) W*` in the eigenbasis of `K`.
    fn observable(&self) -> CMat {
        let sys = &self.model.system;
        let signs: Vec<f64> = (0..sys.dim).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        &sys.eigenbasis * wcl_core::linalg::diag_real(&signs) * sys.eigenbasis.adjoint()
    }

    fn channel(&self) -> Result<usize> {
        let channels = &self.model.reservoir.channels;
        if let Some(ch) = self.cfg.options.channel {
            if ch >= channels.len() {
                bail!("options.channel = {ch} but the model has {} channels", channels.len());
            }
            return Ok(ch);
        }
        channels
            .iter()
            .enumerate()
            .filter_map(|(i, ch)| match ch.label {
                SegmentLabel::Bohr(w) => Some((i, w)),
                SegmentLabel::Off => None,
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .ok_or_else(|| anyhow::anyhow!("the model has no Bohr channel"))
    }

    fn channel_frequency(&self, ch: usize) -> f64 {
        let seg = &self.model.reservoir.channels[ch];
        match seg.label {
            SegmentLabel::Bohr(w) => w,
            SegmentLabel::Off => 0.5 * (seg.interval.0 + seg.interval.1),
        }
    }

    fn pairs(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for &n in &self.cfg.modes(self.model) {
            for &l in &self.cfg.lambdas() {
                out.push((n, l));
            }
        }
        out
    }
}

/// Values below this are treated as converged to round-off.
const NOISE_FLOOR: f64 = 1e-12;

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0] || w[1] <= NOISE_FLOOR)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" > ")
}

fn monotone_check(name: &str, label: &str, sups: &[f64]) -> Check {
    if sups.len() < 2 {
        return Check::new(name, true, format!("{label}: single coupling value, nothing to compare"));
    }
    Check::new(name, strictly_decreasing(sups), format!("{label}: {}", fmt_list(sups)))
}

fn matrix_text(m: &CMat) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e} {:e}", m[(i, j)].re, m[(i, j)].im)).collect();
        s += &row.join("  ");
        s.push('\n');
    }
    s
}

pub fn davies(ctx: &Ctx) -> Result<Outcome> {
    let sys = &ctx.model.system;
    let dd = ctx.davies()?;
    let gap = upsilon_method_gap(sys, &ctx.model.reservoir)?;
    let mut text = format!("dim {}\nnoise_dim {}\nupsilon\n{}", dd.dim, dd.noise_dim, matrix_text(&dd.upsilon));
    for b in &dd.nu_blocks {
        text += &format!("nu_block omega {:e} multiplicity {} offset {}\n{}", b.omega, b.multiplicity, b.offset, matrix_text(&b.matrix));
    }
    text += &format!("nu_star_nu\n{}", matrix_text(&dd.nu_star_nu()));
    let mut table =
        Table::new("davies_residuals.csv", &["dissipativity_residual", "method_gap", "re_upsilon_hermiticity", "upsilon_norm"]);
    table.push(row![dd.dissipativity_residual, gap, hermiticity_defect(&dd.re_upsilon()), op_norm(&dd.upsilon)]);
    let tol = &ctx.cfg.tolerance;
    Ok(Outcome {
        tables: vec![table],
        texts: vec![("davies.txt".into(), text)],
        checks: vec![
            Check::new(
                "dissipativity",
                dd.dissipativity_residual <= tol.dissipativity,
                format!("residual {:.3e} <= {:.0e}", dd.dissipativity_residual, tol.dissipativity),
            ),
            Check::new("method_agreement", gap <= tol.method_gap, format!("relative gap {gap:.3e} <= {:.0e}", tol.method_gap)),
        ],
    })
}

pub fn lindblad_evolve(ctx: &Ctx) -> Result<Outcome> {
    let dd = ctx.davies()?;
    let l = build_lindblad(&dd)?;
    let s = ctx.observable();
    let d = dd.dim;
    let mut header = vec!["t".to_string()];
    for i in 0..d {
        for j in 0..d {
            header.push(format!("s{i}{j}_re"));
            header.push(format!("s{i}{j}_im"));
        }
    }
    header.push("choi_min".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = Table::new("lindblad_evolve.csv", &header);
    let times = ctx.cfg.times();
    let rows: Vec<(Vec<_>, f64)> = times
        .par_iter()
        .map(|&t| {
            let st = evolve_semigroup(&l, t, &s);
            let mut r = row![t];
            for i in 0..d {
                for j in 0..d {
                    r.extend(row![st[(i, j)].re, st[(i, j)].im]);
                }
            }
            let choi = choi_min_eigenvalue(&l, t);
            r.extend(row![choi]);
            (r, choi)
        })
        .collect();
    let worst = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    for (r, _) in rows {
        table.push(r);
    }
    let tol = ctx.cfg.tolerance.choi;
    Ok(Outcome {
        tables: vec![table],
        texts: Vec::new(),
        checks: vec![Check::new("complete_positivity", worst >= -tol, format!("min Choi eigenvalue {worst:.3e} >= -{tol:.0e}"))],
    })
}

/// `full`: truncated Fock space; otherwise the one-excitation sector.
pub fn reduced_sweep(ctx: &Ctx, full: bool) -> Result<Outcome> {
    let dd = ctx.davies()?;
    let sys = &ctx.model.system;
    let t0 = ctx.cfg.options.t0;
    let times = ctx.cfg.times();
    let n_max = ctx.cfg.options.n_max;
    let results: Vec<Vec<f64>> = ctx
        .pairs()
        .par_iter()
        .map(|&(n, l)| -> Result<Vec<f64>> {
            let disc = ctx.grid(n)?;
            let scale = 1.0 / (l * l);
            if full {
                let sim = FockSimulation::new(sys, &disc, n_max, l)?;
                times.iter().map(|&t| Ok(op_norm(&(sim.compressed(scale * t, scale * t0)? - dd.contraction(t - t0))))).collect()
            } else {
                let sector = FriedrichsSector::new(sys, &disc, l);
                times.iter().map(|&t| Ok(op_norm(&(sector.reduced(t, t0)? - dd.contraction(t - t0))))).collect()
            }
        })
        .collect::<Result<_>>()?;
    let name = if full { "full_evolve.csv" } else { "wcl_sweep.csv" };
    let mut table = Table::new(name, &["lambda", "modes", "t", "error_norm", "bound"]);
    let mut checks = Vec::new();
    let pairs = ctx.pairs();
    for &n in &ctx.cfg.modes(ctx.model) {
        let mut sups = Vec::new();
        for ((pn, l), errs) in pairs.iter().zip(&results) {
            if *pn != n {
                continue;
            }
            let sup = errs.iter().cloned().fold(0.0, f64::max);
            for (t, e) in times.iter().zip(errs) {
                table.push(row![*l, n, *t, *e, sup]);
            }
            sups.push(sup);
        }
        let check = if full { "full_reduced_convergence" } else { "reduced_convergence" };
        checks.push(monotone_check(check, &format!("N={n} sup error"), &sups));
    }
    Ok(Outcome { tables: vec![table], texts: Vec::new(), checks })
}

pub fn correlations(ctx: &Ctx) -> Result<Outcome> {
    let dd = ctx.davies()?;
    let sys = &ctx.model.system;
    let mut chain_times = vec![ctx.cfg.options.t0];
    chain_times.extend(ctx.cfg.times());
    if chain_times.windows(2).any(|w| w[1] <= w[0]) {
        bail!("grid.t must be strictly after options.t0 and free of duplicates for a correlation chain");
    }
    let ops = vec![ctx.observable(); chain_times.len() - 2];
    let limit = correlation_limit(&dd.upsilon, &ops, &chain_times);
    let n_max = ctx.cfg.options.n_max;
    let errs: Vec<f64> = ctx
        .pairs()
        .par_iter()
        .map(|&(n, l)| -> Result<f64> {
            let disc = ctx.grid(n)?;
            let chain = correlation_chain(sys, &disc, l, &ops, &chain_times, n_max)?;
            Ok(op_norm(&(chain - &limit)))
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new("correlations.csv", &["lambda", "modes", "t", "error_norm", "bound"]);
    let tend = *chain_times.last().unwrap();
    let mut checks = Vec::new();
    for &n in &ctx.cfg.modes(ctx.model) {
        let mut series = Vec::new();
        for (&(pn, l), &e) in ctx.pairs().iter().zip(&errs) {
            if pn == n {
                table.push(row![l, n, tend, e, e]);
                series.push(e);
            }
        }
        checks.push(monotone_check("correlation_convergence", &format!("N={n} chain error"), &series));
    }
    Ok(Outcome { tables: vec![table], texts: Vec::new(), checks })
}

fn random_unit(rng: &mut ChaCha8Rng, len: usize) -> CVec {
    CVec::from_fn(len, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).normalize()
}

pub fn resummation(ctx: &Ctx) -> Result<Outcome> {
    let sys = &ctx.model.system;
    let o = &ctx.cfg.options;
    let times = ctx.cfg.times();
    let mut jobs = Vec::new();
    for (n, l) in ctx.pairs() {
        for &t in &times {
            jobs.push((n, l, t));
        }
    }
    let results: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(n, l, t)| -> Result<(f64, f64)> {
            let disc = ctx.grid(n)?;
            let dec = decompose_coupling(sys, &ctx.model.reservoir, &disc, None)?;
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let f_in = random_unit(&mut rng, disc.len());
            let f_out = random_unit(&mut rng, disc.len());
            let chk = resummation_check(sys, &dec, &disc, l, t, o.t0, o.max_m, o.n_max, &f_in, &f_out, o.points)?;
            Ok((chk.residual, chk.tail_bound))
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new("resummation_check.csv", &["lambda", "modes", "t", "error_norm", "bound"]);
    let mut worst: f64 = 0.0;
    for (&(n, l, t), &(r, b)) in jobs.iter().zip(&results) {
        table.push(row![l, n, t, r, b]);
        worst = worst.max(if b > 0.0 { r / b } else if r == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(Outcome {
        tables: vec![table],
        texts: Vec::new(),
        checks: vec![Check::new(
            "resummation_within_tail",
            worst <= 1.0,
            format!("max residual / tail bound = {worst:.3e} over {} points", jobs.len()),
        )],
    })
}

fn lattice_horizon(tmax: f64, dt: f64) -> f64 {
    (tmax / dt - 1e-9).ceil().max(1.0) * dt
}

pub fn dilation_check(ctx: &Ctx) -> Result<Outcome> {
    let dd = ctx.davies()?;
    let l = build_lindblad(&dd)?;
    let s = ctx.observable();
    let times = ctx.cfg.times();
    let steps = ctx.cfg.steps();
    let tmax = *times.last().unwrap();
    let cutoff = ctx.cfg.options.cutoff;
    let tol = &ctx.cfg.tolerance;
    struct Run {
        errors: Vec<(f64, f64)>,
        unitality: f64,
    }
    let runs: Vec<Run> = steps
        .par_iter()
        .map(|&dt| -> Result<Run> {
            let dp = build_dilation(&dd, dt, lattice_horizon(tmax, dt), cutoff)?;
            let errors = times
                .iter()
                .map(|&t| -> Result<(f64, f64)> {
                    let a = op_norm(&(dilation_contraction(&dp, t)? - dd.contraction(t)));
                    let b = op_norm(&(dilation_markov(&dp, t, &s)? - evolve_semigroup(&l, t, &s)));
                    Ok((a, b))
                })
                .collect::<Result<_>>()?;
            Ok(Run { errors, unitality: unitality_defect(&dp) })
        })
        .collect::<Result<_>>()?;
    let mut table =
        Table::new("dilation_check.csv", &["t", "dt", "contraction_error", "markov_error", "unitality_defect"]);
    for (dt, run) in steps.iter().zip(&runs) {
        for (t, (a, b)) in times.iter().zip(&run.errors) {
            table.push(row![*t, *dt, *a, *b, run.unitality]);
        }
    }
    let mut checks = Vec::new();
    let finest = runs.last().unwrap();
    let worst = finest.errors.iter().map(|e| e.0.max(e.1)).fold(0.0, f64::max);
    checks.push(Check::new(
        "dilation_accuracy",
        worst <= tol.dilation,
        format!("max error {worst:.3e} at dt = {:e} (limit {:.0e})", steps.last().unwrap(), tol.dilation),
    ));
    let mut ratios = Vec::new();
    for i in 0..steps.len() {
        for j in i + 1..steps.len() {
            if ((steps[i] / steps[j]) - 2.0).abs() > 1e-9 {
                continue;
            }
            for (k, &t) in times.iter().enumerate() {
                let (a, b) = (runs[i].errors[k], runs[j].errors[k]);
                if t != 0.0 && a.0.min(a.1) > 1e-14 {
                    ratios.push(a.0 / b.0);
                    ratios.push(a.1 / b.1);
                }
            }
        }
    }
    if !ratios.is_empty() {
        let ok = ratios.iter().all(|r| (tol.ratio_low..=tol.ratio_high).contains(r));
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
        checks.push(Check::new(
            "dilation_first_order",
            ok,
            format!("halving ratios in [{lo:.3}, {hi:.3}], required [{}, {}]", tol.ratio_low, tol.ratio_high),
        ));
    }
    let unit = runs.iter().map(|r| r.unitality).fold(0.0, f64::max);
    checks.push(Check::new("exact_unitality", unit <= tol.unitality, format!("max ‖Φ(1) − 1‖ = {unit:.3e}")));

    let dt = *steps.last().unwrap();
    let dp = build_dilation(&dd, dt, lattice_horizon(tmax, dt), cutoff)?;
    let zren = RenormalizerZren::new(&ctx.model.system, &dp);
    let w = &ctx.model.system.eigenbasis;
    let top = w.column(w.ncols() - 1).into_owned();
    let ground = w.column(0).into_owned();
    let bins = dp.lattice.bins_for(tmax)?.max(1);
    let tests = vec![
        ZrenTestState { system: top.clone(), quantum: None },
        ZrenTestState { system: top, quantum: Some((bins / 3, dd.noise_dim.saturating_sub(1))) },
        ZrenTestState { system: ground, quantum: Some((bins - 1, 0)) },
    ];
    let defect = if dd.noise_dim == 0 { 0.0 } else { zren_conservation(&dp, &zren, tmax, &tests)? };
    let comm = zren.commutator_defect(&dp);
    let mut ztable = Table::new("zren_check.csv", &["t", "dt", "expectation_defect", "commutator_defect"]);
    ztable.push(row![tmax, dt, defect, comm]);
    checks.push(Check::new("zren_conservation", defect <= tol.zren, format!("expectation defect {defect:.3e}")));
    Ok(Outcome { tables: vec![table, ztable], texts: Vec::new(), checks })
}

fn gaussian(channel: usize, center: f64, width: f64, delay: f64) -> AsymptoticVector {
    AsymptoticVector::scalar(channel, WavePacket::Gaussian { center, width, delay })
}

fn field_tests(channel: usize) -> Vec<FieldTest> {
    let g = gaussian(channel, 0.0, 1.0, 0.0);
    let h = gaussian(channel, 0.3, 0.8, 0.2);
    vec![
        FieldTest::One { out: g.clone(), inp: g.clone() },
        FieldTest::One { out: h.clone(), inp: g.clone() },
        FieldTest::Two { out: [g.clone(), h.clone()], inp: [g, h] },
    ]
}

const ELEMENT_HEADER: [&str; 6] = ["lambda", "modes", "t", "element", "gap", "baseline"];

pub fn extended_wcl(ctx: &Ctx, parts: &[Part]) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut table = Table::new("extended_wcl.csv", &ELEMENT_HEADER);
    let channel = ctx.channel()?;
    let lambdas = ctx.cfg.lambdas();
    if parts.contains(&Part::Annihilator) || parts.contains(&Part::Free) {
        let fine = ctx.fine_grid()?;
        let n = ctx.cfg.options.fine_modes;
        if parts.contains(&Part::Annihilator) {
            let dec = decompose_coupling(&ctx.model.system, &ctx.model.reservoir, &fine, None)?;
            let g = gaussian(channel, 0.0, 1.0, 0.0);
            let probes = &ctx.cfg.options.probe_times;
            let mut per_term = vec![Vec::new(); dec.len()];
            for &l in &lambdas {
                let gaps: Vec<Vec<f64>> = (0..dec.len())
                    .into_par_iter()
                    .map(|j| -> Result<Vec<f64>> {
                        probes
                            .iter()
                            .map(|&t| {
                                let a = annihilator_limit(&dec, j, t, l, &g)?;
                                Ok(a.second.map_or(a.first.norm(), |s| (a.first - s).norm()))
                            })
                            .collect()
                    })
                    .collect::<Result<_>>()?;
                for (j, gs) in gaps.iter().enumerate() {
                    for (&t, &gap) in probes.iter().zip(gs) {
                        table.push(row![l, n, t, format!("annihilator:{j}"), gap, 0.0]);
                    }
                    per_term[j].push(gs.iter().cloned().fold(0.0, f64::max));
                }
            }
            let ok = per_term.iter().all(|s| strictly_decreasing(s));
            let detail = per_term
                .iter()
                .enumerate()
                .filter(|(_, s)| s.iter().any(|&x| x > NOISE_FLOOR))
                .map(|(j, s)| format!("term {j}: {}", fmt_list(s)))
                .collect::<Vec<_>>()
                .join("; ");
            out.checks.push(Check::new("annihilator_limit", ok || lambdas.len() < 2, detail));
        }
        if parts.contains(&Part::Free) {
            let tests = field_tests(channel);
            let sys = &ctx.model.system;
            for &t in &ctx.cfg.options.free_times {
                let mut sups = Vec::new();
                for &l in &lambdas {
                    let rows = free_dynamics_limit(sys, &ctx.model.reservoir, &fine, l, t, &tests)?;
                    for r in &rows {
                        table.push(row![l, n, t, format!("free:{}", r.label), r.gap(), 0.0]);
                    }
                    sups.push(rows.iter().map(|r| r.gap()).fold(0.0, f64::max));
                }
                out.checks.push(monotone_check("free_dynamics_limit", &format!("t={t} max deviation"), &sups));
            }
        }
    }
    if parts.contains(&Part::Elements) {
        element_part(ctx, channel, &mut table, &mut out.checks)?;
    }
    out.tables.push(table);
    Ok(out)
}

fn element_part(ctx: &Ctx, channel: usize, table: &mut Table, checks: &mut Vec<Check>) -> Result<()> {
    let dd = ctx.davies()?;
    let sys = &ctx.model.system;
    let res = &ctx.model.reservoir;
    let t0 = ctx.cfg.options.t0;
    let times = ctx.cfg.times();
    let dt = *ctx.cfg.steps().last().unwrap();
    let tmax = times.last().unwrap().max(t0);
    let dp = build_dilation(&dd, dt, lattice_horizon(tmax, dt), ctx.cfg.options.cutoff)?;
    let g = FieldState::One(gaussian(channel, 0.0, 0.5, 0.5));
    let vac = FieldState::Vacuum;
    let labels = ["vv", "gg", "gv", "vg"];
    let states = [(&vac, &vac), (&g, &g), (&g, &vac), (&vac, &g)];
    let n_max = ctx.cfg.options.n_max;
    // gaps[(n, λ)][element][time], baselines[(n, λ)][element]
    let results: Vec<(Vec<Vec<f64>>, Vec<f64>)> = ctx
        .pairs()
        .par_iter()
        .map(|&(n, l)| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
            let disc = ctx.grid(n)?;
            let sim = FockSimulation::new(sys, &disc, n_max, l)?;
            let mut gaps = Vec::new();
            let mut base = Vec::new();
            for (o, i) in states {
                base.push(extended_wcl_matrix_element(&sim, res, &disc, &dp, t0, t0, o, i)?.gap());
                gaps.push(
                    times
                        .iter()
                        .map(|&t| Ok(extended_wcl_matrix_element(&sim, res, &disc, &dp, t, t0, o, i)?.gap()))
                        .collect::<Result<Vec<f64>>>()?,
                );
            }
            Ok((gaps, base))
        })
        .collect::<Result<_>>()?;
    let pairs = ctx.pairs();
    for &n in &ctx.cfg.modes(ctx.model) {
        let mut series = vec![Vec::new(); labels.len()];
        for (&(pn, l), (gaps, base)) in pairs.iter().zip(&results) {
            if pn != n {
                continue;
            }
            for (k, label) in labels.iter().enumerate() {
                for (&t, &gap) in times.iter().zip(&gaps[k]) {
                    table.push(row![l, n, t, *label, gap, base[k]]);
                }
                let worst = gaps[k].iter().map(|g| (g - base[k]).max(0.0)).fold(0.0, f64::max);
                series[k].push(if k == 0 { gaps[k].iter().cloned().fold(0.0, f64::max) } else { worst });
            }
        }
        checks.push(monotone_check("vacuum_element", &format!("N={n} vacuum gap"), &series[0]));
        let one: Vec<Check> =
            (1..labels.len()).map(|k| monotone_check("x", &format!("{} gap - baseline", labels[k]), &series[k])).collect();
        checks.push(Check::new(
            "one_particle_elements",
            one.iter().all(|c| c.pass),
            format!("N={n} {}", one.iter().map(|c| c.detail.clone()).collect::<Vec<_>>().join("; ")),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Part {
    Annihilator,
    Free,
    Elements,
}

pub fn theta_check(ctx: &Ctx) -> Result<Outcome> {
    let res = &ctx.model.reservoir;
    let channel = ctx.channel()?;
    let omega = ctx.channel_frequency(channel);
    let d = ctx.model.system.dim;
    let fine = ctx.fine_grid()?;
    let bump: Arc<dyn Fn(f64) -> CMat + Send + Sync> =
        Arc::new(move |x: f64| CMat::identity(1, 1) * c(0.5 * (-(x - omega) * (x - omega)).exp(), 0.0));
    let theta = ThetaMap::new(CMat::identity(d, d), bump.clone(), res)?;
    let tests = field_tests(channel);
    let lambdas = ctx.cfg.lambdas();
    let rows: Vec<Vec<ComparisonRow>> =
        lambdas.par_iter().map(|&l| theta_compression(res, &fine, l, &theta, &tests)).collect::<Result<_, _>>()?;
    let mut table = Table::new("theta_check.csv", &["lambda", "test", "gap"]);
    let mut sups = Vec::new();
    for (&l, rs) in lambdas.iter().zip(&rows) {
        for r in rs {
            table.push(row![l, r.label.clone(), r.gap()]);
        }
        sups.push(rs.iter().map(|r| r.gap()).fold(0.0, f64::max));
    }
    let mut checks = vec![monotone_check("theta_compression", "max gap", &sups)];

    let phase: Arc<dyn Fn(f64) -> CMat + Send + Sync> = Arc::new(|x: f64| CMat::identity(1, 1) * c(0.6 * x.cos(), 0.6 * x.sin()));
    let s1 = ctx.observable() * c(0.5, 0.0) + CMat::identity(d, d) * c(0.0, 0.25);
    let s2 = ctx.model.system.hamiltonian.clone();
    let t1 = ThetaMap::new(s1, bump, res)?;
    let t2 = ThetaMap::new(s2, phase, res)?;
    let mut mtable = Table::new("theta_multiplicativity.csv", &["bins", "cutoff", "defect"]);
    let mut worst: f64 = 0.0;
    for bins in 1..=2 {
        let lhs = theta_apply(&t1.compose(&t2), 2, bins)?;
        let rhs = theta_apply(&t1, 2, bins)? * theta_apply(&t2, 2, bins)?;
        let defect = fro(&(lhs - rhs));
        mtable.push(row![bins, 2usize, defect]);
        worst = worst.max(defect);
    }
    let tol = ctx.cfg.tolerance.multiplicativity;
    checks.push(Check::new("theta_multiplicative", worst <= tol, format!("max defect {worst:.3e}")));
    Ok(Outcome { tables: vec![table, mtable], texts: Vec::new(), checks })
}

pub fn pairings(ctx: &Ctx) -> Result<Outcome> {
    let max_n = ctx.cfg.options.max_n;
    let mut table =
        Table::new("pairings.csv", &["n", "pairings", "double_factorial", "involutions", "involution_number"]);
    let mut ok = true;
    let mut text = String::new();
    for n in 0..=max_n {
        let ps = enumerate_pairings(n)?;
        let inv = enumerate_partial_pairings(n)?.len() as u64;
        let df = double_factorial_odd(n);
        let expected = involution_number(n);
        ok &= ps.len() as u64 == df && inv == expected;
        table.push(row![n, ps.len(), df, inv, expected]);
        if ctx.brackets {
            for p in &ps {
                text += &format!("{n} {}\n", p.to_bracket_string());
            }
        }
    }
    let known = [1u64, 1, 2, 4, 10, 26];
    let first: Vec<u64> = (0..=max_n.min(5)).map(|n| enumerate_partial_pairings(n).map(|v| v.len() as u64)).collect::<Result<_, _>>()?;
    ok &= first[..] == known[..first.len()];
    let texts = if ctx.brackets { vec![("pairings.txt".to_string(), text)] } else { Vec::new() };
    Ok(Outcome {
        tables: vec![table],
        texts,
        checks: vec![Check::new("pairing_counts", ok, format!("exhaustive enumeration up to n = {max_n}"))],
    })
}
