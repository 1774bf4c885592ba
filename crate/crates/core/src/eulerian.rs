//! Eulerian description in configuration space: the momentum field
//! `p(t, q)` and density `ρ(t, q)` evolved on a grid.

use crate::advect::{self, DensityReport, StepReport};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::lagrangian::DeterminantHistory;
use crate::model::SystemModel;

fn check_vector_field(model: &SystemModel, field: &GridField, what: &str) -> Result<()> {
    if field.components != model.dim() || field.dims() != model.dim() {
        return Err(Error::contract(format!(
            "{what} must have {} components on a {}-dimensional grid",
            model.dim(),
            model.dim()
        )));
    }
    Ok(())
}

/// Applies the velocity map nodewise: `v(q) = φ(t, q, p(q))`.
pub fn velocity_from_momentum(model: &SystemModel, p_field: &GridField, t: f64) -> Result<GridField> {
    check_vector_field(model, p_field, "momentum field")?;
    let speed = |t: f64, q: &[f64], p: &[f64], out: &mut [f64]| model.velocity(t, q, p, out);
    let mut v = advect::speed_field(p_field, &speed, t);
    v.t = t;
    Ok(v)
}

/// One semi-Lagrangian step of `∂p/∂t + (v·∇)p = F`.
pub fn step_momentum_field(model: &SystemModel, p_field: &GridField, dt: f64) -> Result<(GridField, StepReport)> {
    check_vector_field(model, p_field, "momentum field")?;
    let speed = |t: f64, q: &[f64], p: &[f64], out: &mut [f64]| model.velocity(t, q, p, out);
    let source = |t: f64, q: &[f64], p: &[f64], out: &mut [f64]| model.force(t, q, p, out);
    advect::semi_lagrangian_step(p_field, &speed, &source, dt)
}

/// Conservative upwind step of `∂ρ/∂t + ∇·(ρ v) = 0`.
pub fn step_density(v_field: &GridField, rho: &GridField, dt: f64) -> Result<(GridField, DensityReport)> {
    advect::conservative_step(v_field, rho, dt)
}

/// Largest `|∂p_α/∂q_β − ∂p_β/∂q_α|` over nodes and index pairs.
pub fn curl_diagnostic(p_field: &GridField) -> Result<f64> {
    let s = p_field.dims();
    if s < 2 || p_field.components != s {
        return Err(Error::contract("curl diagnostic needs an s-component field with s >= 2"));
    }
    let mut worst: f64 = 0.0;
    for a in 0..s {
        for b in a + 1..s {
            let dab = p_field.derivative(a, b);
            let dba = p_field.derivative(b, a);
            for (x, y) in dab.iter().zip(&dba) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(worst)
}

/// Steepening proxy `max |∂v_α/∂q_β| · min h` of one velocity snapshot.
pub fn gradient_proxy(v_field: &GridField) -> f64 {
    let s = v_field.dims();
    let mut worst: f64 = 0.0;
    for a in 0..v_field.components {
        for b in 0..s {
            for d in v_field.derivative(a, b) {
                worst = worst.max(d.abs());
            }
        }
    }
    worst * v_field.spec.min_spacing()
}

/// Default proxy threshold for flagging characteristic crossing.
pub const DEFAULT_MULTIVALUED_THRESHOLD: f64 = 0.5;

/// First snapshot time at which the gradient proxy exceeds `threshold`, or
/// at which the attached flow-map determinant has crossed zero.
pub fn detect_multivaluedness(
    history: &[GridField],
    threshold: f64,
    determinant: Option<&DeterminantHistory>,
) -> Result<Option<f64>> {
    if history.len() < 2 {
        return Err(Error::contract("multivaluedness detection needs at least two snapshots"));
    }
    let det_zero = determinant.and_then(|d| d.first_zero());
    for snap in history {
        if gradient_proxy(snap) > threshold || det_zero.is_some_and(|t0| snap.t >= t0) {
            return Ok(Some(snap.t));
        }
    }
    Ok(None)
}

/// Settings for a multi-step Eulerian run.
#[derive(Debug, Clone)]
pub struct EulerianOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Halve `dt` on CFL violation instead of failing.
    pub auto_reduce: bool,
    /// Give up after this many halvings of one step.
    pub max_reductions: usize,
    pub threshold: f64,
    /// Keep every `cadence`-th snapshot (first and last always kept).
    pub cadence: usize,
}

impl EulerianOptions {
    pub fn new(dt: f64, t_end: f64) -> Self {
        EulerianOptions {
            dt,
            t_end,
            auto_reduce: false,
            max_reductions: 30,
            threshold: DEFAULT_MULTIVALUED_THRESHOLD,
            cadence: 1,
        }
    }

    pub fn auto_reduce(mut self, yes: bool) -> Self {
        self.auto_reduce = yes;
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn with_cadence(mut self, cadence: usize) -> Self {
        self.cadence = cadence.max(1);
        self
    }
}

/// Snapshot of momentum (and density when evolved) at one time.
#[derive(Debug, Clone)]
pub struct EulerianSnapshot {
    pub p: GridField,
    pub rho: Option<GridField>,
}

#[derive(Debug, Clone)]
pub struct EulerianRun {
    pub snapshots: Vec<EulerianSnapshot>,
    /// Human-readable record of step-size changes and detector flags.
    pub log: Vec<String>,
    /// Time at which the run stopped on detected multivaluedness.
    pub caustic: Option<f64>,
    /// Mass lost through outflow boundaries over the whole run.
    pub boundary_outflow: f64,
}

impl EulerianRun {
    pub fn last(&self) -> &EulerianSnapshot {
        self.snapshots.last().expect("runs hold at least the initial snapshot")
    }

    /// Turns a caustic stop into an error.
    pub fn into_result(self) -> Result<Self> {
        match self.caustic {
            Some(t) => Err(Error::Caustic { t }),
            None => Ok(self),
        }
    }
}

/// Evolves `p` (and `ρ` when given) from `p0.t` to `t_end`. Stops at the
/// first snapshot flagged by the gradient proxy.
pub fn run_eulerian(
    model: &SystemModel,
    p0: &GridField,
    rho0: Option<&GridField>,
    opts: &EulerianOptions,
) -> Result<EulerianRun> {
    check_vector_field(model, p0, "momentum field")?;
    if !(opts.dt > 0.0) || !(opts.t_end > p0.t) {
        return Err(Error::config("need dt > 0 and t_end beyond the initial time"));
    }
    let mut p = p0.clone();
    let mut rho = rho0.cloned();
    let mut dt = opts.dt;
    let mut log = Vec::new();
    let mut snapshots = vec![EulerianSnapshot {
        p: p.clone(),
        rho: rho.clone(),
    }];
    let mut outflow = 0.0;
    let mut step = 0usize;
    let mut extrapolating = false;
    let tol = 1e-12 * opts.t_end.abs().max(1.0);
    while p.t < opts.t_end - tol {
        let h = dt.min(opts.t_end - p.t);
        let v = velocity_from_momentum(model, &p, p.t)?;
        let attempt = step_momentum_field(model, &p, h).and_then(|(p_next, rep)| {
            let r = match &rho {
                Some(r) => Some(step_density(&v, r, h)?),
                None => None,
            };
            Ok((p_next, rep, r))
        });
        match attempt {
            Ok((mut p_next, rep, r)) => {
                let t_next = if h < dt { opts.t_end } else { p.t + h };
                p_next.t = t_next;
                if !rep.extrapolated.is_empty() && !extrapolating {
                    log.push(format!(
                        "t = {t_next}: backward feet left the domain at {} boundary nodes; values extrapolated",
                        rep.extrapolated.len()
                    ));
                }
                extrapolating = !rep.extrapolated.is_empty();
                if let Some((mut r_next, drep)) = r {
                    r_next.t = t_next;
                    outflow += drep.boundary_outflow;
                    if !drep.negative_nodes.is_empty() {
                        log.push(format!(
                            "t = {t_next}: {} nodes with density in [-1e-12, 0)",
                            drep.negative_nodes.len()
                        ));
                    }
                    rho = Some(r_next);
                }
                p = p_next;
                step += 1;
            }
            Err(e @ Error::Cfl { .. }) if opts.auto_reduce => {
                let mut reductions = 1usize;
                let mut new_dt = dt * 0.5;
                // halve until the current speed field admits the step
                while advect::check_cfl(&v, new_dt).is_err() {
                    reductions += 1;
                    new_dt *= 0.5;
                    if reductions > opts.max_reductions {
                        return Err(e);
                    }
                }
                log.push(format!("t = {}: dt reduced from {dt} to {new_dt} ({e})", p.t));
                dt = new_dt;
                continue;
            }
            Err(e) => return Err(e),
        }
        let v_now = velocity_from_momentum(model, &p, p.t)?;
        let proxy = gradient_proxy(&v_now);
        let done = p.t >= opts.t_end - tol;
        if proxy > opts.threshold {
            log.push(format!(
                "t = {}: multivaluedness flagged (gradient proxy {proxy} > {})",
                p.t, opts.threshold
            ));
            snapshots.push(EulerianSnapshot {
                p: p.clone(),
                rho: rho.clone(),
            });
            return Ok(EulerianRun {
                snapshots,
                log,
                caustic: Some(p.t),
                boundary_outflow: outflow,
            });
        }
        if done || step % opts.cadence == 0 {
            snapshots.push(EulerianSnapshot {
                p: p.clone(),
                rho: rho.clone(),
            });
        }
    }
    Ok(EulerianRun {
        snapshots,
        log,
        caustic: None,
        boundary_outflow: outflow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Axis, GridSpec};
    use crate::lagrangian::{integrate_trajectory, IntegrationOptions, PhaseState};
    use crate::model::{self, Charge, EmPotentials};

    #[test]
    fn velocity_examples() {
        let spec = GridSpec::line(0.0, 1.0, 5).unwrap();
        let m2 = model::free_particle(1, 2.0).unwrap();
        let p = GridField::scalar_from_fn(&spec, 0.0, |_| 4.0);
        let v = velocity_from_momentum(&m2, &p, 0.0).unwrap();
        assert!(v.values.iter().all(|x| *x == 2.0));

        let spec3 = GridSpec::new(vec![Axis::outflow(0.0, 1.0, 3); 3]).unwrap();
        let em = model::em_particle(Charge::default(), EmPotentials::constant_vector([1.0, 0.0, 0.0])).unwrap();
        let p = GridField::from_fn(&spec3, 3, 0.0, |_, out| out.copy_from_slice(&[1.0, 0.0, 0.0]));
        let v = velocity_from_momentum(&em, &p, 0.0).unwrap();
        assert!(v.values.iter().all(|x| *x == 0.0));

        let cfg = model::AuditConfig::default().with_samples(50);
        let generic = model::hamiltonian_from_expr(1, "p1^2/2 + x^2/2", &cfg).unwrap();
        let p = GridField::scalar_from_fn(&spec, 0.0, |x| 3.0 * x[0] - 1.0);
        let v = velocity_from_momentum(&generic, &p, 0.0).unwrap();
        assert_eq!(v.values, p.values);
    }

    #[test]
    fn uniform_free_field_unchanged() {
        let spec = GridSpec::line(-1.0, 1.0, 41).unwrap();
        let free = model::free_particle(1, 1.0).unwrap();
        let p = GridField::scalar_from_fn(&spec, 0.0, |_| 0.7);
        let (next, _) = step_momentum_field(&free, &p, 0.01).unwrap();
        for (a, b) in next.values.iter().zip(&p.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn damped_field_decays_uniformly() {
        let spec = GridSpec::line(-1.0, 1.0, 41).unwrap();
        let beta = 0.8;
        let damped = model::damped_free_particle(1, 1.0, beta).unwrap();
        let p0 = GridField::scalar_from_fn(&spec, 0.0, |_| 1.0);
        let run = run_eulerian(&damped, &p0, None, &EulerianOptions::new(1e-3, 1.0)).unwrap();
        let p = &run.last().p;
        assert!((p.t - 1.0).abs() < 1e-12);
        for v in &p.values {
            assert!((v - (-beta).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn oscillator_field_matches_characteristics() {
        let spec = GridSpec::line(-1.0, 1.0, 201).unwrap();
        let ho = model::harmonic_oscillator(1, 1.0, 1.0).unwrap();
        let p0 = GridField::scalar_from_fn(&spec, 0.0, |_| 0.0);
        let run = run_eulerian(&ho, &p0, None, &EulerianOptions::new(2e-3, 0.5)).unwrap();
        let p = &run.last().p;
        for node in 20..181 {
            let x = spec.coords(node)[0];
            // the characteristic arriving at x started from x / cos(t)
            let x0 = x / 0.5f64.cos();
            let tr = integrate_trajectory(&ho, &PhaseState::new(0.0, vec![x0], vec![0.0]), &IntegrationOptions::rk4(1e-3, 0.5)).unwrap();
            assert!((p.get(0, node) - tr.last().p[0]).abs() < 1e-3);
        }
    }

    #[test]
    fn curl_examples() {
        let spec = GridSpec::new(vec![Axis::outflow(-1.0, 1.0, 11), Axis::outflow(-1.0, 1.0, 11)]).unwrap();
        let grad = GridField::from_fn(&spec, 2, 0.0, |x, out| out.copy_from_slice(x));
        assert!(curl_diagnostic(&grad).unwrap() < 1e-12);
        let rot = GridField::from_fn(&spec, 2, 0.0, |x, out| {
            out[0] = -x[1];
            out[1] = x[0];
        });
        assert!((curl_diagnostic(&rot).unwrap() - 2.0).abs() < 1e-12);
        let line = GridSpec::line(0.0, 1.0, 5).unwrap();
        assert!(curl_diagnostic(&GridField::zeros(&line, 1, 0.0)).is_err());
    }

    #[test]
    fn free_flow_never_flagged_and_focusing_flagged_near_one() {
        let spec = GridSpec::line(-1.0, 1.0, 201).unwrap();
        let free = model::free_particle(1, 1.0).unwrap();
        let uniform = GridField::scalar_from_fn(&spec, 0.0, |_| 1.0);
        let run = run_eulerian(&free, &uniform, None, &EulerianOptions::new(1e-3, 0.5)).unwrap();
        assert!(run.caustic.is_none());
        let hist: Vec<GridField> = run.snapshots.iter().map(|s| s.p.clone()).collect();
        assert_eq!(detect_multivaluedness(&hist, 0.5, None).unwrap(), None);

        let focusing = GridField::scalar_from_fn(&spec, 0.0, |x| -x[0]);
        let run = run_eulerian(&free, &focusing, None, &EulerianOptions::new(1e-3, 2.0).auto_reduce(true)).unwrap();
        let t = run.caustic.unwrap();
        assert!((t - 1.0).abs() < 0.05, "{t}");
        assert!(matches!(run.into_result(), Err(Error::Caustic { .. })));
    }

    #[test]
    fn density_run_conserves_mass_on_periodic_domain() {
        let spec = GridSpec::new(vec![Axis::periodic(0.0, 1.0, 50)]).unwrap();
        let free = model::free_particle(1, 1.0).unwrap();
        let p0 = GridField::scalar_from_fn(&spec, 0.0, |_| 0.5);
        let rho0 = GridField::scalar_from_fn(&spec, 0.0, |x| 1.0 + (6.0 * x[0]).sin().powi(2));
        let run = run_eulerian(&free, &p0, Some(&rho0), &EulerianOptions::new(0.01, 1.0).with_cadence(1000)).unwrap();
        let rho = run.last().rho.as_ref().unwrap();
        assert!((rho.integral(0) - rho0.integral(0)).abs() < 1e-12);
        assert_eq!(run.snapshots.len(), 2);
    }
}
