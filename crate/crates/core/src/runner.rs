//! Config-driven runs behind each command-line subcommand. Every run writes
//! its files from one thread, in a fixed order, so the same config and seed
//! give byte-identical output.

use std::path::{Path, PathBuf};

use crate::dipole::{run_dipole_fields, DipoleDrive, DipoleFieldSet};
use crate::error::{Error, Result};
use crate::eulerian::{run_eulerian, EulerianOptions};
use crate::expr::{Expr, Var};
use crate::grid::{Axes, GridField, GridSpec};
use crate::hj::{hj_residual_field, max_valid_abs, solve_hj_characteristics, CharacteristicOptions};
use crate::io::manifest::{write_dipole_set, write_layer_set};
use crate::io::{sample_expr, snapshot_path, write_field_snapshot, write_trajectories, ModelSpec, RunConfig};
use crate::lagrangian::{integrate_ensemble, EnsembleCloud, IntegrationOptions, PhaseState};
use crate::model::SystemModel;
use crate::multilayer::{build_oscillator_layers, check_flux_matching, detect_turning_surface, LayerSet};
use crate::prep::run_momentum_representation;

/// Files written and a few human-readable summary lines.
#[derive(Debug, Default)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub lines: Vec<String>,
}

impl RunReport {
    fn note(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("{prefix}{k}")).collect()
}

fn as_refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn require_rep(cfg: &RunConfig, want: Axes, cmd: &str) -> Result<()> {
    if cfg.representation == want {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{}: `{cmd}` needs representation = {}",
            cfg.path.display(),
            want.tag()
        )))
    }
}

/// The grid vector field given directly (`p0`/`q0`) or derived from the
/// initial action (`∇S0`, or `−∇Φ0` in the p-representation).
fn initial_vector(cfg: &RunConfig) -> Result<GridField> {
    let spec = cfg.grid()?;
    let s = spec.dims();
    let exprs: Vec<Expr> = match (&cfg.init.vector, &cfg.init.action) {
        (Some(v), _) => v.clone(),
        (None, Some(a)) => (0..s)
            .map(|k| match cfg.representation {
                Axes::Q => a.derivative(Var::Q(k)),
                Axes::P => Expr::Neg(Box::new(a.derivative(Var::P(k)))),
            })
            .collect(),
        (None, None) => {
            let (a, v) = match cfg.representation {
                Axes::Q => ("S0", "p0"),
                Axes::P => ("Phi0", "q0"),
            };
            return Err(Error::config(format!("{}: [init] needs `{v}` or `{a}`", cfg.path.display())));
        }
    };
    let mut out = GridField::zeros(spec, s, 0.0).with_axes(cfg.representation);
    for (k, e) in exprs.iter().enumerate() {
        let f = sample_expr(e, spec, cfg.representation, 0.0)?;
        out.component_mut(k).copy_from_slice(f.component(0));
    }
    Ok(out)
}

fn initial_density(cfg: &RunConfig) -> Result<Option<GridField>> {
    cfg.init.rho0.as_ref().map(|e| cfg.sample(e)).transpose()
}

fn out_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map_or_else(|| cfg.output.directory.clone(), Path::to_path_buf)
}

fn build_model(cfg: &RunConfig, seed: u64) -> Result<SystemModel> {
    let model = cfg.model.build(seed)?;
    if let Some(g) = &cfg.grid {
        if g.dims() != model.dim() {
            return Err(Error::config(format!(
                "{}: grid has {} axes but the model has {} degrees of freedom",
                cfg.path.display(),
                g.dims(),
                model.dim()
            )));
        }
    }
    Ok(model)
}

/// One member on every `stride`-th grid node, with momenta (q-rep) or
/// coordinates (p-rep) from the initial data.
pub fn lagrangian(cfg: &RunConfig, out: Option<&Path>, seed: u64) -> Result<RunReport> {
    let model = build_model(cfg, seed)?;
    let spec = cfg.grid()?;
    let field = initial_vector(cfg)?;
    let states: Vec<PhaseState> = (0..spec.node_count())
        .step_by(cfg.init.stride.max(1))
        .map(|node| {
            let x = spec.coords(node);
            let mut y = vec![0.0; spec.dims()];
            field.vector_at(node, &mut y);
            match cfg.representation {
                Axes::Q => PhaseState::new(0.0, x, y),
                Axes::P => PhaseState::new(0.0, y, x),
            }
        })
        .collect();
    let opts = IntegrationOptions {
        dt: cfg.time.dt,
        t_end: cfg.time.t_end,
        method: cfg.time.method,
        cadence: cfg.time.cadence.max(1),
    };
    let cloud = EnsembleCloud::uniform(states)?;
    let (_, trajs) = integrate_ensemble(&model, &cloud, &opts, true)?;
    let trajs = trajs.expect("trajectories were requested");
    let mut report = RunReport::default();
    report.note(format!("{} members integrated to t = {}", trajs.len(), cfg.time.t_end));
    let drift = trajs
        .iter()
        .filter_map(|tr| {
            let (a, b) = (&tr.samples[0], tr.last());
            Some((model.energy(b.t, &b.q, &b.p)? - model.energy(a.t, &a.q, &a.p)?).abs())
        })
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.max(d))));
    if let Some(d) = drift {
        report.note(format!("max energy drift {d:.3e}"));
    }
    if cfg.output.trajectories {
        report.files = write_trajectories(&out_dir(cfg, out), "member", &trajs)?;
    }
    Ok(report)
}

/// Momentum (and density) fields in the q-representation. A detected
/// caustic writes the snapshots up to it and then fails with its time.
pub fn eulerian(cfg: &RunConfig, out: Option<&Path>, seed: u64) -> Result<RunReport> {
    require_rep(cfg, Axes::Q, "eulerian")?;
    let model = build_model(cfg, seed)?;
    let p0 = initial_vector(cfg)?;
    let rho0 = initial_density(cfg)?;
    let mut opts = EulerianOptions::new(cfg.time.dt, cfg.time.t_end)
        .auto_reduce(cfg.time.auto_reduce)
        .with_cadence(cfg.time.cadence);
    if let Some(th) = cfg.time.threshold {
        opts = opts.with_threshold(th);
    }
    let run = run_eulerian(&model, &p0, rho0.as_ref(), &opts)?;
    let mut report = RunReport::default();
    report.lines.extend(run.log.iter().cloned());
    if rho0.is_some() {
        report.note(format!("mass lost through outflow boundaries {:.3e}", run.boundary_outflow));
    }
    if cfg.output.fields {
        let dir = out_dir(cfg, out);
        let pn = names("p", p0.components);
        for (i, snap) in run.snapshots.iter().enumerate() {
            let mut s = crate::io::Snapshot::from_field(&snap.p, &as_refs(&pn))?;
            if let Some(r) = &snap.rho {
                s.push_field(r, &["rho"])?;
            }
            let path = snapshot_path(&dir, "eulerian", i);
            crate::io::write_snapshot(&path, &s)?;
            report.files.push(path);
        }
    }
    match run.caustic {
        Some(t) => Err(Error::Caustic { t }),
        None => Ok(report),
    }
}

/// Action field by characteristics, with the finite-difference residual
/// between the last two kept snapshots.
pub fn hj(cfg: &RunConfig, out: Option<&Path>, seed: u64) -> Result<RunReport> {
    require_rep(cfg, Axes::Q, "hj")?;
    let model = build_model(cfg, seed)?;
    let s0_expr = cfg
        .init
        .action
        .as_ref()
        .ok_or_else(|| Error::config(format!("{}: [init] needs `S0`", cfg.path.display())))?;
    let s0 = cfg.sample(s0_expr)?;
    let opts = CharacteristicOptions::new(cfg.time.dt, cfg.time.t_end).with_cadence(cfg.time.cadence);
    let field = solve_hj_characteristics(&model, &s0, &opts)?;
    let mut report = RunReport::default();
    let snaps = &field.snapshots;
    if snaps.len() >= 2 {
        let r = hj_residual_field(&model, &snaps[snaps.len() - 2], &snaps[snaps.len() - 1])?;
        report.note(format!("max residual between the last two snapshots {:.3e}", max_valid_abs(&r)));
    }
    if cfg.output.fields {
        let dir = out_dir(cfg, out);
        for (i, snap) in snaps.iter().enumerate() {
            let path = snapshot_path(&dir, "action", i);
            write_field_snapshot(&path, snap, &["S"])?;
            report.files.push(path);
        }
    }
    Ok(report)
}

/// Coordinate (and density) fields over the momentum grid.
pub fn prep(cfg: &RunConfig, out: Option<&Path>, seed: u64) -> Result<RunReport> {
    require_rep(cfg, Axes::P, "prep")?;
    let model = build_model(cfg, seed)?;
    let q0 = initial_vector(cfg)?;
    let rho0 = initial_density(cfg)?;
    let snaps = run_momentum_representation(&model, &q0, rho0.as_ref(), cfg.time.dt, cfg.time.t_end, cfg.time.cadence)?;
    let mut report = RunReport::default();
    report.note(format!("{} snapshots to t = {}", snaps.len(), cfg.time.t_end));
    if cfg.output.fields {
        let dir = out_dir(cfg, out);
        let qn = names("q", q0.components);
        for (i, snap) in snaps.iter().enumerate() {
            let mut s = crate::io::Snapshot::from_field(&snap.q, &as_refs(&qn))?;
            if let Some(r) = &snap.rho {
                s.push_field(r, &["rho"])?;
            }
            let path = snapshot_path(&dir, "momentum", i);
            crate::io::write_snapshot(&path, &s)?;
            report.files.push(path);
        }
    }
    Ok(report)
}

/// Two-branch oscillator layer set at the configured energy and weights.
pub fn layers(cfg: &RunConfig, out: Option<&Path>) -> Result<RunReport> {
    let ModelSpec::Harmonic { dims: 1, m, omega } = cfg.model else {
        return Err(Error::config(format!(
            "{}: layer sets are built for the 1-D harmonic oscillator only",
            cfg.path.display()
        )));
    };
    let spec = cfg
        .layers
        .as_ref()
        .ok_or_else(|| Error::config(format!("{}: `layers` needs a [layers] section", cfg.path.display())))?;
    let built = build_oscillator_layers(spec.energy, m, omega, cfg.grid()?)?;
    if spec.weights.len() != built.layers.len() {
        return Err(Error::config(format!(
            "{}: the oscillator has {} layers but {} weights were given",
            cfg.path.display(),
            built.layers.len(),
            spec.weights.len()
        )));
    }
    let set = LayerSet::new(built.layers, spec.weights.clone())?;
    let mut report = RunReport::default();
    let surface = detect_turning_surface(&set.layers[0]).with_layers(0, 1);
    let flux = check_flux_matching(&set.layers[0], &set.layers[1], &surface, spec.tolerance)?;
    report.note(format!(
        "{} turning cells, max flux mismatch {:.3e} ({})",
        surface.cells.len(),
        flux.max_mismatch,
        if flux.matched { "matched" } else { "NOT matched" }
    ));
    let mixed = set.mixed_density()?;
    report.note(format!("mixed density integral {:.6}", mixed.integral(0)));
    let dir = out_dir(cfg, out);
    let manifest = write_layer_set(&dir, "layer", &set)?;
    let mixed_path = dir.join("mixed.hjfield");
    write_field_snapshot(&mixed_path, &mixed, &["rho"])?;
    report.files.extend((0..set.layers.len()).map(|n| dir.join(format!("layer_{n:04}.hjfield"))));
    report.files.push(manifest);
    report.files.push(mixed_path);
    Ok(report)
}

/// Eulerian dipole fields on a position grid. Only magnetic driving is
/// supported here, so the charge must vanish.
pub fn dipole(cfg: &RunConfig, out: Option<&Path>) -> Result<RunReport> {
    let (params, fields) = cfg.model.dipole()?;
    if params.e != 0.0 {
        return Err(Error::config(format!(
            "{}: Eulerian dipole runs take no electric driving; set e = 0",
            cfg.path.display()
        )));
    }
    let spec: &GridSpec = cfg.grid()?;
    let sample = |e: Option<&Expr>, default: f64| -> Result<GridField> {
        match e {
            Some(e) => cfg.sample(e),
            None => Ok(GridField::scalar_from_fn(spec, 0.0, |_| default)),
        }
    };
    let fs0 = DipoleFieldSet::new(
        sample(cfg.init.action.as_ref(), 0.0)?,
        sample(cfg.init.xi0.as_ref(), 0.0)?,
        sample(cfg.init.chi0.as_ref(), 0.0)?,
        sample(cfg.init.rho0.as_ref(), 1.0)?,
        params.spin_mag,
    )?;
    let magnetic = fields.magnetic.clone();
    let drive = DipoleDrive {
        phi: None,
        vector: None,
        magnetic: &*magnetic,
    };
    let sets = run_dipole_fields(&fs0, &params, drive, cfg.time.dt, cfg.time.t_end, cfg.time.cadence)?;
    let mut report = RunReport::default();
    let last = sets.last().expect("runs keep the initial set");
    let m0 = fs0.rho.integral(0);
    report.note(format!(
        "{} field sets to t = {}, mass {:.6} -> {:.6}",
        sets.len(),
        last.t(),
        m0,
        last.rho.integral(0)
    ));
    if cfg.output.fields {
        let dir = out_dir(cfg, out);
        for (i, fs) in sets.iter().enumerate() {
            let stem = format!("dipole_{i:04}");
            report.files.push(write_dipole_set(&dir, &stem, fs)?);
        }
    }
    Ok(report)
}
