use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wcl_core::model_file::{bundled_models, parse_model, ModelSpec};
use wcl_core::system_model::discretize_reservoir;

use crate::Experiment;

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lambda: Option<Vec<f64>>,
    pub t: Option<Vec<f64>>,
    pub dt: Option<Vec<f64>>,
    pub modes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Options {
    pub t0: f64,
    pub n_max: usize,
    pub max_order: usize,
    pub max_m: usize,
    pub points: usize,
    pub cutoff: usize,
    pub rule: Option<String>,
    /// Channel carrying the test wave packets; defaults to the highest Bohr frequency.
    pub channel: Option<usize>,
    /// Modes per channel of the Gauss grid used by the one-particle limits.
    pub fine_modes: usize,
    pub probe_times: Vec<f64>,
    pub free_times: Vec<f64>,
    pub max_n: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            t0: 0.0,
            n_max: 2,
            max_order: 2,
            max_m: 2,
            points: 12,
            cutoff: 1,
            rule: None,
            channel: None,
            fine_modes: 400,
            probe_times: vec![0.0, 1.0, 10.0],
            free_times: vec![0.0, 1.0],
            max_n: 5,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub dissipativity: f64,
    pub method_gap: f64,
    pub choi: f64,
    pub dilation: f64,
    pub ratio_low: f64,
    pub ratio_high: f64,
    pub unitality: f64,
    pub zren: f64,
    pub multiplicativity: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            dissipativity: 1e-8,
            method_gap: 1e-4,
            choi: 1e-10,
            dilation: 5e-3,
            ratio_low: 1.7,
            ratio_high: 2.3,
            unitality: 1e-12,
            zren: 1e-10,
            multiplicativity: 1e-12,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Bundled model name or a path relative to the config file.
    pub model: String,
    pub experiment: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub options: Options,
    #[serde(default)]
    pub tolerance: Tolerances,
}

/// A parsed config together with its source and resolved model.
pub struct Loaded {
    pub config: RunConfig,
    pub config_hash: String,
    pub base_dir: PathBuf,
}

pub struct ResolvedModel {
    pub spec: ModelSpec,
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load(path: &Path) -> Result<Loaded> {
    let src = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let config: RunConfig = toml::from_str(&src).map_err(|e| {
        let line = e.span().map(|s| src[..s.start].matches('\n').count() + 1);
        match line {
            Some(l) => anyhow!("{}: line {l}: {}", path.display(), e.message()),
            None => anyhow!("{}: {}", path.display(), e.message()),
        }
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, config_hash: sha256_hex(src.as_bytes()), base_dir })
}

fn bundled_source(name: &str) -> Option<&'static str> {
    let stem = name.strip_suffix(".toml").unwrap_or(name);
    bundled_models().into_iter().find(|(file, _)| file.strip_suffix(".toml") == Some(stem)).map(|(_, src)| src)
}

impl Loaded {
    fn model_path(&self) -> PathBuf {
        let p = PathBuf::from(&self.config.model);
        if p.is_absolute() {
            p
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn resolve_model(&self) -> Result<ResolvedModel> {
        let source = match bundled_source(&self.config.model) {
            Some(src) => src.to_string(),
            None => {
                let path = self.model_path();
                std::fs::read_to_string(&path).with_context(|| format!("cannot read model {}", path.display()))?
            }
        };
        let mut spec = parse_model(&source).map_err(|e| anyhow!("model {}: {e}", self.config.model))?;
        if let Some(rule) = &self.config.options.rule {
            spec.discretization.rule = rule.parse().map_err(|e: String| anyhow!("options.rule: {e}"))?;
        }
        let hash = sha256_hex(source.as_bytes());
        Ok(ResolvedModel { spec, hash })
    }
}

impl RunConfig {
    pub fn lambdas(&self) -> Vec<f64> {
        let mut l = self.grid.lambda.clone().unwrap_or_default();
        l.sort_by(|a, b| b.total_cmp(a));
        l
    }

    pub fn times(&self) -> Vec<f64> {
        let mut t = self.grid.t.clone().unwrap_or_default();
        t.sort_by(f64::total_cmp);
        t
    }

    pub fn steps(&self) -> Vec<f64> {
        let mut dt = self.grid.dt.clone().unwrap_or_default();
        dt.sort_by(|a, b| b.total_cmp(a));
        dt
    }

    pub fn modes(&self, spec: &ModelSpec) -> Vec<usize> {
        self.grid.modes.clone().unwrap_or_else(|| vec![spec.discretization.modes_per_channel])
    }
}

struct Needs {
    lambda: bool,
    t: bool,
    dt: bool,
    /// Horizon is measured in rescaled time `t / λ²`.
    rescaled: Option<bool>,
}

fn needs(exp: Experiment) -> Needs {
    use Experiment::*;
    let (lambda, t, dt, rescaled) = match exp {
        Davies | Pairings => (false, false, false, None),
        LindbladEvolve => (false, true, false, None),
        FullEvolve | WclSweep | Correlations => (true, true, false, Some(true)),
        ResummationCheck => (true, true, false, Some(false)),
        DilationCheck => (false, true, true, None),
        ExtendedWcl => (true, true, true, Some(true)),
        ThetaCheck => (true, false, false, None),
    };
    Needs { lambda, t, dt, rescaled }
}

/// Static checks on a config; an empty list means it can run.
pub fn validate(loaded: &Loaded, exp: Experiment) -> Vec<String> {
    let cfg = &loaded.config;
    let mut diags = Vec::new();
    if let Some(name) = &cfg.experiment {
        if name != exp.name() {
            diags.push(format!("config is for experiment `{name}` but `{}` was requested", exp.name()));
        }
    }
    let model = match loaded.resolve_model() {
        Ok(m) => Some(m),
        Err(e) => {
            diags.push(format!("{e:#}"));
            None
        }
    };
    let need = needs(exp);
    let grids: [(&str, Option<usize>, bool); 4] = [
        ("grid.lambda", cfg.grid.lambda.as_ref().map(Vec::len), need.lambda),
        ("grid.t", cfg.grid.t.as_ref().map(Vec::len), need.t),
        ("grid.dt", cfg.grid.dt.as_ref().map(Vec::len), need.dt),
        ("grid.modes", cfg.grid.modes.as_ref().map(Vec::len), false),
    ];
    for (name, len, required) in grids {
        match len {
            Some(0) => diags.push(format!("{name} is empty")),
            None if required => diags.push(format!("{name} is required for `{}`", exp.name())),
            _ => {}
        }
    }
    for &l in cfg.grid.lambda.iter().flatten() {
        if !(l > 0.0) || !l.is_finite() {
            diags.push(format!("grid.lambda contains {l}; coupling constants must be positive"));
        }
    }
    for &dt in cfg.grid.dt.iter().flatten() {
        if !(dt > 0.0) {
            diags.push(format!("grid.dt contains {dt}; steps must be positive"));
        }
    }
    for &n in cfg.grid.modes.iter().flatten() {
        if n < 2 {
            diags.push(format!("grid.modes contains {n}; at least 2 modes per channel are needed"));
        }
    }
    for &t in cfg.grid.t.iter().flatten() {
        if !t.is_finite() {
            diags.push(format!("grid.t contains {t}"));
        }
    }
    let tol = &cfg.tolerance;
    for (name, v) in [
        ("dissipativity", tol.dissipativity),
        ("method_gap", tol.method_gap),
        ("choi", tol.choi),
        ("dilation", tol.dilation),
        ("ratio_low", tol.ratio_low),
        ("ratio_high", tol.ratio_high),
        ("unitality", tol.unitality),
        ("zren", tol.zren),
        ("multiplicativity", tol.multiplicativity),
    ] {
        if !(v > 0.0) {
            diags.push(format!("tolerance.{name} must be positive, got {v}"));
        }
    }
    if let (Some(model), Some(rescaled)) = (&model, need.rescaled) {
        diags.extend(recurrence_guard(cfg, &model.spec, rescaled));
    }
    diags
}

/// Predicts recurrence-guard violations from the grid spacing and suggests a mode count.
fn recurrence_guard(cfg: &RunConfig, spec: &ModelSpec, rescaled: bool) -> Vec<String> {
    let lambdas = cfg.lambdas();
    let times = cfg.times();
    let (Some(&lmin), Some(&tmax)) = (lambdas.last(), times.last()) else {
        return Vec::new();
    };
    if !(lmin > 0.0) {
        return Vec::new();
    }
    let span = (tmax - cfg.options.t0).abs().max((times[0] - cfg.options.t0).abs());
    let horizon = if rescaled { span / (lmin * lmin) } else { span };
    let mut diags = Vec::new();
    for n in cfg.modes(spec) {
        if n < 2 {
            continue;
        }
        let Ok(disc) = discretize_reservoir(&spec.reservoir, n, spec.discretization.rule) else {
            continue;
        };
        let limit = 0.5 * disc.recurrence_time();
        if horizon > limit {
            let mut suggested = ((n as f64) * horizon / limit).ceil() as usize;
            for _ in 0..40 {
                match discretize_reservoir(&spec.reservoir, suggested, spec.discretization.rule) {
                    Ok(d) if 0.5 * d.recurrence_time() >= horizon => break,
                    _ => suggested = suggested + suggested / 8 + 1,
                }
            }
            diags.push(format!(
                "recurrence guard: horizon {horizon:.3} exceeds {limit:.3} (half of 2π/Δx) at {n} modes per channel; use at least {suggested} modes per channel"
            ));
        }
    }
    diags
}
