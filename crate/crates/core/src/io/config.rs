//! INI-style run configuration.
//!
//! ```text
//! [model]
//! name = harmonic_oscillator
//! dims = 1
//! m = 1
//! omega = 1
//! representation = q
//!
//! [grid]
//! min = -2
//! max = 2
//! nodes = 257
//!
//! [time]
//! dt = 0.005
//! t_end = 1
//!
//! [init]
//! S0 = "0"
//! rho0 = "exp(-x^2)"
//! ```
//!
//! Expressions are double-quoted; lists are comma separated. `#` starts a
//! comment outside quotes. Every error names the offending line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::dipole::{DipoleFields, DipoleParams};
use crate::error::{Error, Result};
use crate::expr::{self, Bindings, Expr, Symbols, Var};
use crate::grid::{Axes, Axis, Boundary, GridField, GridSpec};
use crate::lagrangian::Method;
use crate::model::{self, AuditConfig, Charge, DragVariant, EmPotentials, ScalarField, SystemModel, VectorField};

use super::read_text;

const SECTIONS: [&str; 6] = ["model", "grid", "time", "init", "output", "layers"];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Clone)]
struct Section {
    line: usize,
    entries: BTreeMap<String, Entry>,
}

fn line_err(line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigLine { line, msg: msg.into() }
}

/// Removes a trailing comment, ignoring `#` inside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_sections(text: &str) -> Result<(BTreeMap<String, Section>, usize)> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        last = n;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| line_err(n, format!("unterminated section header `{line}`")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(line_err(n, format!("unknown section [{name}] (expected one of {})", SECTIONS.join(", "))));
            }
            if sections.contains_key(name) {
                return Err(line_err(n, format!("section [{name}] appears twice")));
            }
            sections.insert(
                name.to_string(),
                Section {
                    line: n,
                    entries: BTreeMap::new(),
                },
            );
            current = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| line_err(n, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(line_err(n, "empty key"));
        }
        let section = current
            .as_ref()
            .ok_or_else(|| line_err(n, format!("`{key}` appears before any section header")))?;
        let entries = &mut sections.get_mut(section).expect("section registered").entries;
        if entries.contains_key(key) {
            return Err(line_err(n, format!("duplicate key `{key}` in [{section}]")));
        }
        entries.insert(
            key.to_string(),
            Entry {
                value: value.trim().to_string(),
                line: n,
            },
        );
    }
    Ok((sections, last.max(1)))
}

/// Typed access to one section with line-numbered errors.
struct Reader<'a> {
    name: &'static str,
    section: Option<&'a Section>,
    eof: usize,
}

impl<'a> Reader<'a> {
    fn entry(&self, key: &str) -> Option<&'a Entry> {
        self.section.and_then(|s| s.entries.get(key))
    }

    fn required(&self, key: &str) -> Result<&'a Entry> {
        self.entry(key).ok_or_else(|| match self.section {
            Some(s) => line_err(s.line, format!("[{}] is missing `{key}`", self.name)),
            None => line_err(self.eof, format!("missing [{}] section (needed for `{key}`)", self.name)),
        })
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        if let Some(s) = self.section {
            for (k, e) in &s.entries {
                if !allowed.contains(&k.as_str()) {
                    return Err(line_err(
                        e.line,
                        format!("unknown key `{k}` in [{}] (expected one of {})", self.name, allowed.join(", ")),
                    ));
                }
            }
        }
        Ok(())
    }

    fn num_at(e: &Entry, key: &str) -> Result<f64> {
        let v: f64 = e
            .value
            .parse()
            .map_err(|_| line_err(e.line, format!("`{key}` must be a number, got `{}`", e.value)))?;
        if !v.is_finite() {
            return Err(line_err(e.line, format!("`{key}` must be finite")));
        }
        Ok(v)
    }

    fn num(&self, key: &str) -> Result<f64> {
        Self::num_at(self.required(key)?, key)
    }

    fn num_or(&self, key: &str, default: f64) -> Result<f64> {
        self.entry(key).map_or(Ok(default), |e| Self::num_at(e, key))
    }

    fn positive(&self, key: &str, default: Option<f64>) -> Result<f64> {
        let (v, line) = match (self.entry(key), default) {
            (Some(e), _) => (Self::num_at(e, key)?, e.line),
            (None, Some(d)) => return Ok(d),
            (None, None) => (self.num(key)?, 0),
        };
        if v > 0.0 {
            Ok(v)
        } else {
            Err(line_err(line, format!("`{key}` must be positive, got {v}")))
        }
    }

    fn count(&self, key: &str, default: Option<usize>) -> Result<usize> {
        match (self.entry(key), default) {
            (Some(e), _) => e
                .value
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| line_err(e.line, format!("`{key}` must be a positive integer, got `{}`", e.value))),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(self.required(key).unwrap_err()),
        }
    }

    fn nums(&self, key: &str) -> Result<(Vec<f64>, usize)> {
        let e = self.required(key)?;
        let v = e
            .value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| line_err(e.line, format!("`{key}` must list finite numbers, got `{}`", s.trim())))
            })
            .collect::<Result<_>>()?;
        Ok((v, e.line))
    }

    fn word(&self, key: &str) -> Option<(&'a str, usize)> {
        self.entry(key).map(|e| (e.value.as_str(), e.line))
    }

    /// Comma-separated list of double-quoted strings.
    fn quoted(&self, key: &str) -> Result<Option<(Vec<String>, usize)>> {
        let Some(e) = self.entry(key) else { return Ok(None) };
        let mut out = Vec::new();
        let mut rest = e.value.trim();
        loop {
            let body = rest
                .strip_prefix('"')
                .ok_or_else(|| line_err(e.line, format!("`{key}` must be a double-quoted expression")))?;
            let close = body
                .find('"')
                .ok_or_else(|| line_err(e.line, format!("unterminated quote in `{key}`")))?;
            out.push(body[..close].to_string());
            rest = body[close + 1..].trim_start();
            if rest.is_empty() {
                break;
            }
            rest = rest
                .strip_prefix(',')
                .ok_or_else(|| line_err(e.line, format!("expected `,` between expressions in `{key}`")))?
                .trim_start();
        }
        Ok(Some((out, e.line)))
    }

    fn expr(&self, key: &str, symbols: Symbols) -> Result<Option<Expr>> {
        match self.quoted(key)? {
            None => Ok(None),
            Some((v, line)) if v.len() == 1 => parse_at(&v[0], symbols, line, key).map(Some),
            Some((v, line)) => Err(line_err(line, format!("`{key}` takes one expression, got {}", v.len()))),
        }
    }

    fn exprs(&self, key: &str, symbols: Symbols, count: usize) -> Result<Option<Vec<Expr>>> {
        match self.quoted(key)? {
            None => Ok(None),
            Some((v, line)) if v.len() == count => v
                .iter()
                .map(|s| parse_at(s, symbols, line, key))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some((v, line)) => Err(line_err(line, format!("`{key}` needs {count} expressions, got {}", v.len()))),
        }
    }
}

fn parse_at(text: &str, symbols: Symbols, line: usize, key: &str) -> Result<Expr> {
    expr::parse(text, symbols).map_err(|e| line_err(line, format!("in `{key}`: {e}")))
}

fn position_symbols(dims: usize) -> Symbols {
    Symbols {
        dims,
        momenta: false,
        betas: false,
    }
}

/// Which system to simulate.
#[derive(Debug, Clone)]
pub enum ModelSpec {
    Free { dims: usize, m: f64 },
    Harmonic { dims: usize, m: f64, omega: f64 },
    UniformForce { m: f64, f0: f64 },
    DampedFree { dims: usize, m: f64, beta: f64 },
    /// `H = |p|²/2m + U(t, q)` with optional drag.
    Potential { dims: usize, m: f64, beta: f64, potential: Expr },
    Hamiltonian { dims: usize, text: String },
    Em { charge: Charge, phi: String, a: [String; 3], beta: f64, drag: DragVariant },
    SpringPair { k: f64, m1: f64, m2: f64 },
    Dipole { params: DipoleParams, electric: Vec<Expr>, magnetic: Vec<Expr> },
}

impl ModelSpec {
    /// Configuration-space dimension (for the dipole, the fixed 3 of its
    /// field expressions).
    pub fn dims(&self) -> usize {
        match self {
            ModelSpec::Free { dims, .. }
            | ModelSpec::Harmonic { dims, .. }
            | ModelSpec::DampedFree { dims, .. }
            | ModelSpec::Potential { dims, .. }
            | ModelSpec::Hamiltonian { dims, .. } => *dims,
            ModelSpec::UniformForce { .. } => 1,
            ModelSpec::Em { .. } | ModelSpec::Dipole { .. } => 3,
            ModelSpec::SpringPair { .. } => 2,
        }
    }

    /// Builds the system; `seed` drives the finite-difference audits.
    pub fn build(&self, seed: u64) -> Result<SystemModel> {
        let audit = AuditConfig::default().with_seed(seed);
        match self {
            ModelSpec::Free { dims, m } => model::free_particle(*dims, *m),
            ModelSpec::Harmonic { dims, m, omega } => model::harmonic_oscillator(*dims, *m, *omega),
            ModelSpec::UniformForce { m, f0 } => model::uniform_force(*m, *f0),
            ModelSpec::DampedFree { dims, m, beta } => model::damped_free_particle(*dims, *m, *beta),
            ModelSpec::Potential { dims, m, beta, potential } => {
                let time_dependent = potential.depends_on(Var::T);
                let u_expr = potential.clone();
                let u: ScalarField = Arc::new(move |t, q| u_expr.eval(&Bindings::new(t, q, &[])).unwrap_or(f64::NAN));
                let grad: Vec<Expr> = (0..*dims).map(|k| potential.derivative(Var::Q(k))).collect();
                let g: VectorField = Arc::new(move |t, q, out| {
                    let b = Bindings::new(t, q, &[]);
                    for (o, e) in out.iter_mut().zip(&grad) {
                        *o = e.eval(&b).unwrap_or(f64::NAN);
                    }
                });
                let model = if *beta > 0.0 {
                    model::damped_particle(*dims, *m, u, g, *beta)?
                } else {
                    model::potential_particle_audited(*dims, *m, u, g, &audit)?
                };
                Ok(model.time_dependent(time_dependent))
            }
            ModelSpec::Hamiltonian { dims, text } => model::hamiltonian_from_expr(*dims, text, &audit),
            ModelSpec::Em { charge, phi, a, beta, drag } => {
                let fields = EmPotentials::from_exprs(phi, [&a[0], &a[1], &a[2]])?;
                if *beta > 0.0 {
                    model::damped_em_particle(*charge, fields, *beta, *drag)
                } else {
                    model::em_particle(*charge, fields)
                }
            }
            ModelSpec::SpringPair { k, m1, m2 } => model::spring_pair(*k, *m1, *m2),
            ModelSpec::Dipole { .. } => Err(Error::config("the dipole model runs only under the dipole subcommand")),
        }
    }

    /// Dipole parameters and external fields, with the magnetic Jacobian
    /// derived symbolically.
    pub fn dipole(&self) -> Result<(DipoleParams, DipoleFields)> {
        let ModelSpec::Dipole { params, electric, magnetic } = self else {
            return Err(Error::config("model is not a dipole"));
        };
        let eval3 = |exprs: Vec<Expr>| {
            move |t: f64, r: &[f64; 3]| -> [f64; 3] {
                let b = Bindings::new(t, r, &[]);
                std::array::from_fn(|i| exprs[i].eval(&b).unwrap_or(f64::NAN))
            }
        };
        let jac: Vec<Expr> = magnetic
            .iter()
            .flat_map(|e| (0..3).map(move |j| e.derivative(Var::Q(j))))
            .collect();
        let fields = DipoleFields {
            electric: Arc::new(eval3(electric.clone())),
            magnetic: Arc::new(eval3(magnetic.clone())),
            magnetic_jacobian: Arc::new(move |t, r| {
                let b = Bindings::new(t, r, &[]);
                std::array::from_fn(|i| std::array::from_fn(|j| jac[i * 3 + j].eval(&b).unwrap_or(f64::NAN)))
            }),
        };
        Ok((*params, fields))
    }
}

#[derive(Debug, Clone)]
pub struct TimeSpec {
    pub dt: f64,
    pub t_end: f64,
    pub cadence: usize,
    pub method: Method,
    pub auto_reduce: bool,
    pub threshold: Option<f64>,
}

/// Initial data. Expressions are over the grid coordinates: `x`/`q*` in
/// the q-representation and `p*` in the p-representation.
#[derive(Debug, Clone, Default)]
pub struct InitSpec {
    /// `S0` (q-representation) or `Phi0` (p-representation).
    pub action: Option<Expr>,
    /// `p0` (q-representation) or `q0` (p-representation) components.
    pub vector: Option<Vec<Expr>>,
    pub rho0: Option<Expr>,
    pub xi0: Option<Expr>,
    pub chi0: Option<Expr>,
    /// Lagrangian runs seed one member on every `stride`-th node.
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct OutputSpec {
    pub directory: PathBuf,
    pub fields: bool,
    pub trajectories: bool,
}

#[derive(Debug, Clone)]
pub struct LayersSpec {
    pub energy: f64,
    pub weights: Vec<f64>,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub path: PathBuf,
    pub model: ModelSpec,
    pub representation: Axes,
    pub grid: Option<GridSpec>,
    pub time: TimeSpec,
    pub init: InitSpec,
    pub output: OutputSpec,
    pub layers: Option<LayersSpec>,
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    RunConfig::parse(&read_text(path)?, path)
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (sections, eof) = parse_sections(text)?;
        let reader = |name: &'static str| Reader {
            name,
            section: sections.get(name),
            eof,
        };

        let m = reader("model");
        let (model, representation) = parse_model(&m)?;
        let dims = model.dims();

        let g = reader("grid");
        let grid = match g.section {
            None => None,
            Some(_) => Some(parse_grid(&g, &model)?),
        };
        let grid_dims = grid.as_ref().map_or(dims, GridSpec::dims);

        let t = reader("time");
        t.check_keys(&["dt", "t_end", "cadence", "method", "auto_reduce", "threshold"])?;
        let method = match t.word("method") {
            Some((w, line)) => w.parse().map_err(|e: Error| line_err(line, e.to_string()))?,
            None => Method::Rk4,
        };
        let auto_reduce = match t.word("auto_reduce") {
            None => false,
            Some(("true", _)) => true,
            Some(("false", _)) => false,
            Some((w, line)) => return Err(line_err(line, format!("`auto_reduce` must be true or false, got `{w}`"))),
        };
        let threshold = match t.entry("threshold") {
            Some(_) => Some(t.positive("threshold", None)?),
            None => None,
        };
        let time = TimeSpec {
            dt: t.positive("dt", None)?,
            t_end: t.num("t_end")?,
            cadence: t.count("cadence", Some(1))?,
            method,
            auto_reduce,
            threshold,
        };
        if !(time.t_end > 0.0) {
            return Err(line_err(t.required("t_end")?.line, "`t_end` must be positive"));
        }

        let i = reader("init");
        let (action_key, vector_key) = match representation {
            Axes::Q => ("S0", "p0"),
            Axes::P => ("Phi0", "q0"),
        };
        let allowed = [action_key, vector_key, "rho0", "xi0", "chi0", "stride"];
        i.check_keys(&allowed)?;
        let sym = match representation {
            Axes::Q => position_symbols(grid_dims),
            Axes::P => Symbols::phase(grid_dims),
        };
        let init = InitSpec {
            action: i.expr(action_key, sym)?,
            vector: i.exprs(vector_key, sym, grid_dims)?,
            rho0: i.expr("rho0", sym)?,
            xi0: i.expr("xi0", sym)?,
            chi0: i.expr("chi0", sym)?,
            stride: i.count("stride", Some(1))?,
        };
        if representation == Axes::P {
            for (key, e) in [(action_key, &init.action), ("rho0", &init.rho0)] {
                if let Some(e) = e {
                    if (0..grid_dims).any(|k| e.depends_on(Var::Q(k))) {
                        let line = i.required(key)?.line;
                        return Err(line_err(line, format!("`{key}` lives on the momentum grid and may use only t and p*")));
                    }
                }
            }
        }

        let o = reader("output");
        o.check_keys(&["directory", "formats"])?;
        let directory = o.word("directory").map_or_else(|| PathBuf::from("out"), |(w, _)| PathBuf::from(w));
        let (fields, trajectories) = match o.word("formats") {
            None => (true, true),
            Some((w, line)) => {
                let mut f = (false, false);
                for item in w.split(',').map(str::trim) {
                    match item {
                        "field" | "hjfield" => f.0 = true,
                        "traj" | "hjtraj" => f.1 = true,
                        other => return Err(line_err(line, format!("unknown output format `{other}` (expected field or traj)"))),
                    }
                }
                f
            }
        };

        let l = reader("layers");
        let layers = match l.section {
            None => None,
            Some(_) => {
                l.check_keys(&["energy", "weights", "tolerance"])?;
                let (weights, line) = l.nums("weights")?;
                let sum: f64 = weights.iter().sum();
                if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > crate::multilayer::WEIGHT_TOLERANCE {
                    return Err(line_err(line, format!("layer weights must be non-negative and sum to 1 (sum = {sum})")));
                }
                Some(LayersSpec {
                    energy: l.positive("energy", None)?,
                    weights,
                    tolerance: l.positive("tolerance", Some(1e-3))?,
                })
            }
        };

        Ok(RunConfig {
            path: path.to_path_buf(),
            model,
            representation,
            grid,
            time,
            init,
            output: OutputSpec {
                directory,
                fields,
                trajectories,
            },
            layers,
        })
    }

    pub fn grid(&self) -> Result<&GridSpec> {
        self.grid
            .as_ref()
            .ok_or_else(|| Error::config(format!("{}: this run needs a [grid] section", self.path.display())))
    }

    /// Samples an initial-data expression on the grid at `t = 0`.
    pub fn sample(&self, e: &Expr) -> Result<GridField> {
        sample_expr(e, self.grid()?, self.representation, 0.0)
    }
}

/// Evaluates `e` at every node. Grid coordinates bind to `q*` or `p*`
/// according to `axes`.
pub fn sample_expr(e: &Expr, spec: &GridSpec, axes: Axes, t: f64) -> Result<GridField> {
    GridField::try_from_fn(spec, 1, t, |x, out| {
        let b = match axes {
            Axes::Q => Bindings::new(t, x, &[]),
            Axes::P => Bindings::new(t, &[], x),
        };
        out[0] = e.eval(&b)?;
        Ok(())
    })
    .map(|f| f.with_axes(axes))
}

fn parse_model(m: &Reader<'_>) -> Result<(ModelSpec, Axes)> {
    let (name, name_line) = m.word("name").ok_or_else(|| m.required("name").unwrap_err())?;
    let representation = match m.word("representation") {
        None | Some(("q", _)) => Axes::Q,
        Some(("p", _)) => Axes::P,
        Some((w, line)) => return Err(line_err(line, format!("representation must be q or p, got `{w}`"))),
    };
    let dims = || m.count("dims", Some(1));
    let mass = || m.positive("m", Some(1.0));
    let common = ["name", "representation"];
    let keys = |extra: &[&str]| -> Result<()> {
        let all: Vec<&str> = common.iter().chain(extra).copied().collect();
        m.check_keys(&all)
    };
    let spec = match name {
        "free_particle" => {
            keys(&["dims", "m"])?;
            ModelSpec::Free { dims: dims()?, m: mass()? }
        }
        "harmonic_oscillator" => {
            keys(&["dims", "m", "omega"])?;
            ModelSpec::Harmonic {
                dims: dims()?,
                m: mass()?,
                omega: m.positive("omega", Some(1.0))?,
            }
        }
        "uniform_force" => {
            keys(&["m", "f0"])?;
            ModelSpec::UniformForce {
                m: mass()?,
                f0: m.num("f0")?,
            }
        }
        "damped_free_particle" => {
            keys(&["dims", "m", "beta"])?;
            ModelSpec::DampedFree {
                dims: dims()?,
                m: mass()?,
                beta: m.num("beta")?,
            }
        }
        "potential" => {
            keys(&["dims", "m", "beta", "potential"])?;
            let d = dims()?;
            let potential = m
                .expr("potential", position_symbols(d))?
                .ok_or_else(|| m.required("potential").unwrap_err())?;
            ModelSpec::Potential {
                dims: d,
                m: mass()?,
                beta: m.num_or("beta", 0.0)?,
                potential,
            }
        }
        "hamiltonian" => {
            keys(&["dims", "hamiltonian"])?;
            let d = dims()?;
            let (text, line) = m.quoted("hamiltonian")?.ok_or_else(|| m.required("hamiltonian").unwrap_err())?;
            if text.len() != 1 {
                return Err(line_err(line, "`hamiltonian` takes one expression"));
            }
            parse_at(&text[0], Symbols::phase(d), line, "hamiltonian")?;
            ModelSpec::Hamiltonian {
                dims: d,
                text: text[0].clone(),
            }
        }
        "em_particle" => {
            keys(&["m", "e", "c", "phi", "a", "beta", "drag"])?;
            let sym = position_symbols(3);
            let phi = match m.quoted("phi")? {
                Some((v, line)) => {
                    parse_at(&v[0], sym, line, "phi")?;
                    v[0].clone()
                }
                None => "0".into(),
            };
            let a = match m.quoted("a")? {
                Some((v, line)) if v.len() == 3 => {
                    for s in &v {
                        parse_at(s, sym, line, "a")?;
                    }
                    [v[0].clone(), v[1].clone(), v[2].clone()]
                }
                Some((v, line)) => return Err(line_err(line, format!("`a` needs 3 expressions, got {}", v.len()))),
                None => ["0".into(), "0".into(), "0".into()],
            };
            let drag = match m.word("drag") {
                Some((w, line)) => w.parse().map_err(|e: Error| line_err(line, e.to_string()))?,
                None => DragVariant::VelocityDrag,
            };
            ModelSpec::Em {
                charge: Charge {
                    m: mass()?,
                    e: m.num_or("e", 1.0)?,
                    c: m.positive("c", Some(1.0))?,
                },
                phi,
                a,
                beta: m.num_or("beta", 0.0)?,
                drag,
            }
        }
        "spring_pair" => {
            keys(&["k", "m1", "m2"])?;
            ModelSpec::SpringPair {
                k: m.positive("k", None)?,
                m1: m.positive("m1", Some(1.0))?,
                m2: m.positive("m2", Some(1.0))?,
            }
        }
        "dipole" => {
            keys(&["m", "e", "c", "gamma", "spin_mag", "electric", "magnetic"])?;
            let sym = position_symbols(3);
            let zero = || vec![Expr::Num(0.0), Expr::Num(0.0), Expr::Num(0.0)];
            let params = DipoleParams {
                m: mass()?,
                e: m.num_or("e", 0.0)?,
                c: m.positive("c", Some(1.0))?,
                gamma: m.num_or("gamma", 1.0)?,
                spin_mag: m.positive("spin_mag", Some(0.5))?,
            };
            ModelSpec::Dipole {
                params,
                electric: m.exprs("electric", sym, 3)?.unwrap_or_else(zero),
                magnetic: m.exprs("magnetic", sym, 3)?.unwrap_or_else(zero),
            }
        }
        other => {
            return Err(line_err(
                name_line,
                format!(
                    "unknown model `{other}` (expected free_particle, harmonic_oscillator, uniform_force, \
                     damped_free_particle, potential, hamiltonian, em_particle, spring_pair or dipole)"
                ),
            ))
        }
    };
    Ok((spec, representation))
}

fn parse_grid(g: &Reader<'_>, model: &ModelSpec) -> Result<GridSpec> {
    g.check_keys(&["min", "max", "nodes", "boundary"])?;
    let (min, line) = g.nums("min")?;
    let (max, _) = g.nums("max")?;
    let nodes_e = g.required("nodes")?;
    let nodes: Vec<usize> = nodes_e
        .value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 2)
                .ok_or_else(|| line_err(nodes_e.line, format!("`nodes` must list integers >= 2, got `{}`", s.trim())))
        })
        .collect::<Result<_>>()?;
    let d = nodes.len();
    if min.len() != d || max.len() != d {
        return Err(line_err(line, format!("min, max and nodes list {}, {} and {d} axes", min.len(), max.len())));
    }
    let expected = model.dims();
    let ok = match model {
        ModelSpec::Dipole { .. } => (1..=3).contains(&d),
        _ => d == expected,
    };
    if !ok {
        return Err(line_err(line, format!("grid has {d} axes but the model needs {expected}")));
    }
    let boundaries: Vec<Boundary> = match g.word("boundary") {
        None => vec![Boundary::Outflow; d],
        Some((w, bl)) => {
            let parsed: Vec<Boundary> = w
                .split(',')
                .map(|s| s.parse().map_err(|e: Error| line_err(bl, e.to_string())))
                .collect::<Result<_>>()?;
            match parsed.len() {
                1 => vec![parsed[0]; d],
                n if n == d => parsed,
                n => return Err(line_err(bl, format!("{n} boundary kinds for {d} axes"))),
            }
        }
    };
    let axes = (0..d).map(|k| Axis::new(min[k], max[k], nodes[k], boundaries[k])).collect();
    GridSpec::new(axes).map_err(|e| line_err(line, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HO: &str = "\
# rest ensemble
[model]
name = harmonic_oscillator
dims = 1
omega = 1

[grid]
min = -2
max = 2
nodes = 65

[time]
dt = 0.01
t_end = 2   # past the caustic

[init]
S0 = \"0\"
rho0 = \"exp(-x^2)\"  # gaussian

[layers]
energy = 0.5
weights = 0.5, 0.5
";

    #[test]
    fn parses_the_oscillator_config() {
        let cfg = RunConfig::parse(HO, Path::new("ho.ini")).unwrap();
        assert!(matches!(cfg.model, ModelSpec::Harmonic { dims: 1, .. }));
        assert_eq!(cfg.grid().unwrap().node_count(), 65);
        assert_eq!(cfg.time.t_end, 2.0);
        let rho = cfg.sample(cfg.init.rho0.as_ref().unwrap()).unwrap();
        assert!((rho.get(0, 32) - 1.0).abs() < 1e-15);
        assert_eq!(cfg.layers.unwrap().weights, vec![0.5, 0.5]);
    }

    fn err_line(text: &str) -> usize {
        match RunConfig::parse(text, Path::new("x")).unwrap_err() {
            Error::ConfigLine { line, .. } => line,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn errors_name_their_line() {
        assert_eq!(err_line(&HO.replace("omega = 1", "omega = fast")), 5);
        assert_eq!(err_line(&HO.replace("S0 = \"0\"", "S0 = \"q7\"")), 17);
        assert_eq!(err_line(&HO.replace("weights = 0.5, 0.5", "weights = 0.5, 0.6")), 22);
        assert_eq!(err_line(&HO.replace("nodes = 65", "nodes = 65\nspeed = 2")), 11);
        assert_eq!(err_line(&HO.replace("[layers]", "[extras]")), 20);
        assert_eq!(err_line(&HO.replace("dt = 0.01\n", "")), 12);
    }

    #[test]
    fn quoted_lists() {
        let text = "[model]\nname = dipole\nmagnetic = \"0\", \"0\", \"2 + 0.1*z\"\n[time]\ndt = 0.1\nt_end = 1\n";
        let cfg = RunConfig::parse(text, Path::new("x")).unwrap();
        let (_, fields) = cfg.model.dipole().unwrap();
        assert_eq!((fields.magnetic)(0.0, &[0.0, 0.0, 1.0]), [0.0, 0.0, 2.1]);
        assert!(((fields.magnetic_jacobian)(0.0, &[0.0; 3])[2][2] - 0.1).abs() < 1e-15);
    }
}
