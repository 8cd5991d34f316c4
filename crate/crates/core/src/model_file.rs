//! TOML model files.
//!
//! ```toml
//! name = "optional label"
//!
//! [system]
//! hamiltonian = [[[re, im], ...], ...]    # rows of complex pairs
//! cluster_tol = 1e-9                      # optional, relative to the spectral diameter
//!
//! [channel.1]                             # key is the Bohr frequency; quote decimals: [channel."0.5"]
//! interval = [0.5, 1.5]
//! multiplicity = 1                        # optional, default 1
//! profile = { kind = "flat", amplitude = 0.2 }
//! coupling = [[[re, im], ...], ...]       # (d * multiplicity) x d, row k*m + mu
//!
//! [[tail]]                                # optional off-resonant segments, same fields
//!
//! [discretization]                        # optional
//! rule = "midpoint"                       # or "gauss"
//! modes_per_channel = 24
//! ```
//!
//! Profiles: `flat {amplitude}`, `lorentzian {amplitude, center, width}`,
//! `gaussian {amplitude, center, width}`, `table {x, values}` with complex `values`.

use crate::linalg::{c, CMat};
use crate::system_model::{
    spectral_decompose, Profile, QuadratureRule, ReservoirModel, Segment, SegmentLabel, SmallSystem,
    DEFAULT_CLUSTER_TOL,
};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;
use toml::Spanned;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{}field `{field}`: {message}", line.map(|l| format!("line {l}, ")).unwrap_or_default())]
pub struct ModelFileError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: Option<String>,
    system: Spanned<RawSystem>,
    #[serde(default)]
    channel: BTreeMap<String, Spanned<RawSegment>>,
    #[serde(default)]
    tail: Vec<Spanned<RawSegment>>,
    discretization: Option<Spanned<RawDiscretization>>,
}

type RawMatrix = Vec<Vec<[f64; 2]>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    hamiltonian: Spanned<RawMatrix>,
    cluster_tol: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    interval: Spanned<[f64; 2]>,
    multiplicity: Option<Spanned<usize>>,
    profile: Spanned<RawProfile>,
    coupling: Spanned<RawMatrix>,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum RawProfile {
    Flat { amplitude: f64 },
    Lorentzian { amplitude: f64, center: f64, width: f64 },
    Gaussian { amplitude: f64, center: f64, width: f64 },
    Table { x: Vec<f64>, values: Vec<[f64; 2]> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDiscretization {
    rule: Option<Spanned<String>>,
    modes_per_channel: Option<Spanned<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscretizationSpec {
    pub rule: QuadratureRule,
    pub modes_per_channel: usize,
}

impl Default for DiscretizationSpec {
    fn default() -> Self {
        Self { rule: QuadratureRule::Midpoint, modes_per_channel: 24 }
    }
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub name: String,
    pub system: SmallSystem,
    pub reservoir: ReservoirModel,
    pub discretization: DiscretizationSpec,
}

struct Ctx<'a> {
    src: &'a str,
}

impl Ctx<'_> {
    fn line(&self, offset: usize) -> usize {
        self.src[..offset.min(self.src.len())].matches('\n').count() + 1
    }

    fn err<T>(&self, spanned: &Spanned<T>, field: &str, message: impl Into<String>) -> ModelFileError {
        ModelFileError { line: Some(self.line(spanned.span().start)), field: field.into(), message: message.into() }
    }
}

fn matrix(ctx: &Ctx, raw: &Spanned<RawMatrix>, field: &str, rows: Option<usize>, cols: Option<usize>) -> Result<CMat, ModelFileError> {
    let m = raw.get_ref();
    let r = m.len();
    if r == 0 {
        return Err(ctx.err(raw, field, "matrix is empty"));
    }
    let ncols = m[0].len();
    if let Some(bad) = m.iter().position(|row| row.len() != ncols) {
        return Err(ctx.err(raw, field, format!("row {} has {} entries, expected {ncols}", bad, m[bad].len())));
    }
    if let Some(expected) = rows {
        if r != expected {
            return Err(ctx.err(raw, field, format!("expected {expected} rows, got {r}")));
        }
    }
    if let Some(expected) = cols {
        if ncols != expected {
            return Err(ctx.err(raw, field, format!("expected {expected} columns, got {ncols}")));
        }
    }
    Ok(CMat::from_fn(r, ncols, |i, j| c(m[i][j][0], m[i][j][1])))
}

fn segment(
    ctx: &Ctx,
    raw: &Spanned<RawSegment>,
    prefix: &str,
    label: SegmentLabel,
    d: usize,
) -> Result<Segment, ModelFileError> {
    let s = raw.get_ref();
    let [a, b] = *s.interval.get_ref();
    if !(b > a) {
        return Err(ctx.err(&s.interval, &format!("{prefix}.interval"), format!("interval ({a}, {b}) is empty")));
    }
    if let SegmentLabel::Bohr(w) = label {
        if !(w > a && w < b) {
            return Err(ctx.err(
                &s.interval,
                &format!("{prefix}.interval"),
                format!("interval ({a}, {b}) does not contain the channel frequency {w}"),
            ));
        }
    }
    let multiplicity = s.multiplicity.as_ref().map(|m| *m.get_ref()).unwrap_or(1);
    if multiplicity == 0 {
        return Err(ctx.err(s.multiplicity.as_ref().unwrap(), &format!("{prefix}.multiplicity"), "must be positive"));
    }
    let coupling = matrix(ctx, &s.coupling, &format!("{prefix}.coupling"), Some(d * multiplicity), Some(d))?;
    let profile = match s.profile.get_ref() {
        RawProfile::Flat { amplitude } => Profile::Flat { amplitude: *amplitude },
        RawProfile::Lorentzian { amplitude, center, width } => {
            Profile::Lorentzian { amplitude: *amplitude, center: *center, width: *width }
        }
        RawProfile::Gaussian { amplitude, center, width } => {
            Profile::Gaussian { amplitude: *amplitude, center: *center, width: *width }
        }
        RawProfile::Table { x, values } => {
            Profile::Table { x: x.clone(), values: values.iter().map(|v| c(v[0], v[1])).collect() }
        }
    };
    profile.validate().map_err(|e| ctx.err(&s.profile, &format!("{prefix}.profile"), e.to_string()))?;
    Ok(Segment { label, interval: (a, b), multiplicity, profile, coupling })
}

fn toml_error(src: &str, e: &toml::de::Error) -> ModelFileError {
    let ctx = Ctx { src };
    let line = e.span().map(|s| ctx.line(s.start));
    let message = e.message().to_string();
    let field = message
        .split('`')
        .nth(1)
        .filter(|_| message.contains('`'))
        .unwrap_or("<document>")
        .to_string();
    ModelFileError { line, field, message }
}

pub fn parse_model(src: &str) -> Result<ModelSpec, ModelFileError> {
    let raw: RawModel = toml::from_str(src).map_err(|e| toml_error(src, &e))?;
    let ctx = Ctx { src };
    let sys_raw = raw.system.get_ref();
    let k = matrix(&ctx, &sys_raw.hamiltonian, "system.hamiltonian", None, None)?;
    if k.nrows() != k.ncols() {
        return Err(ctx.err(
            &sys_raw.hamiltonian,
            "system.hamiltonian",
            format!("matrix must be square, got {}x{}", k.nrows(), k.ncols()),
        ));
    }
    let tol = match &sys_raw.cluster_tol {
        Some(t) if *t.get_ref() < 0.0 => return Err(ctx.err(t, "system.cluster_tol", "must be non-negative")),
        Some(t) => *t.get_ref(),
        None => DEFAULT_CLUSTER_TOL,
    };
    let system = spectral_decompose(&k, tol).map_err(|e| ctx.err(&sys_raw.hamiltonian, "system.hamiltonian", e.to_string()))?;
    let d = system.dim;

    let mut spans = Vec::new();
    let mut channels = Vec::new();
    for (key, seg) in &raw.channel {
        let prefix = format!("channel.{key}");
        let omega: f64 = key
            .parse()
            .map_err(|_| ctx.err(seg, &prefix, format!("channel key `{key}` is not a number")))?;
        let s = segment(&ctx, seg, &prefix, SegmentLabel::Bohr(omega), d)?;
        ReservoirModel::new(&system, vec![s.clone()], vec![]).map_err(|e| ctx.err(seg, &prefix, e.to_string()))?;
        spans.push((prefix, seg.span().start, s.interval));
        channels.push(s);
    }
    let mut tail = Vec::new();
    for (i, seg) in raw.tail.iter().enumerate() {
        let prefix = format!("tail[{i}]");
        let s = segment(&ctx, seg, &prefix, SegmentLabel::Off, d)?;
        spans.push((prefix, seg.span().start, s.interval));
        tail.push(s);
    }
    for (i, (name_a, start_a, (a0, a1))) in spans.iter().enumerate() {
        for (name_b, start_b, (b0, b1)) in spans.iter().skip(i + 1) {
            if a0 < b1 && b0 < a1 {
                return Err(ModelFileError {
                    line: Some(ctx.line(*start_a.max(start_b))),
                    field: format!("{name_b}.interval"),
                    message: format!("interval ({b0}, {b1}) overlaps {name_a} ({a0}, {a1})"),
                });
            }
        }
    }
    let reservoir = ReservoirModel::new(&system, channels, tail).map_err(|e| ModelFileError {
        line: None,
        field: "channel".into(),
        message: e.to_string(),
    })?;

    let mut discretization = DiscretizationSpec::default();
    if let Some(disc) = &raw.discretization {
        let dr = disc.get_ref();
        if let Some(rule) = &dr.rule {
            discretization.rule = rule
                .get_ref()
                .parse()
                .map_err(|m: String| ctx.err(rule, "discretization.rule", m))?;
        }
        if let Some(n) = &dr.modes_per_channel {
            if *n.get_ref() < 2 {
                return Err(ctx.err(n, "discretization.modes_per_channel", "must be at least 2"));
            }
            discretization.modes_per_channel = *n.get_ref();
        }
    }
    Ok(ModelSpec { name: raw.name.unwrap_or_else(|| "unnamed".into()), system, reservoir, discretization })
}

pub fn load_model(path: &Path) -> Result<ModelSpec, ModelFileError> {
    let src = std::fs::read_to_string(path).map_err(|e| ModelFileError {
        line: None,
        field: "<file>".into(),
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_model(&src)
}

/// Models shipped with the repository, as `(file name, source)`.
pub fn bundled_models() -> [(&'static str, &'static str); 3] {
    [
        ("two_level_flat.toml", include_str!("../../../models/two_level_flat.toml")),
        ("zero_coupling.toml", include_str!("../../../models/zero_coupling.toml")),
        ("two_level_gaussian.toml", include_str!("../../../models/two_level_gaussian.toml")),
    ]
}
