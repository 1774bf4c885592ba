//! Lagrangian description: single systems and ensembles integrated as ODEs,
//! plus flow-map diagnostics for the single-valuedness condition.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Boundary, GridField, GridSpec};
use crate::hj::ActionGradient;
use crate::model::SystemModel;

/// Time, coordinates and momenta of one system.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub t: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseState {
    pub fn new(t: f64, q: Vec<f64>, p: Vec<f64>) -> Self {
        PhaseState { t, q, p }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.q.iter().chain(&self.p).all(|v| v.is_finite())
    }

    fn check_dim(&self, model: &SystemModel) -> Result<()> {
        if self.q.len() != model.dim() || self.p.len() != model.dim() {
            return Err(Error::contract(format!(
                "state has {} coordinates and {} momenta, model `{}` has {} degrees of freedom",
                self.q.len(),
                self.p.len(),
                model.name(),
                model.dim()
            )));
        }
        Ok(())
    }
}

/// Time history of one system at a uniform output cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub model: String,
    pub samples: Vec<PhaseState>,
}

impl Trajectory {
    pub fn last(&self) -> &PhaseState {
        self.samples.last().expect("trajectories hold at least one sample")
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rk4,
    /// Kick-drift-kick; only for separable Hamiltonian models.
    Leapfrog,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rk4" => Ok(Method::Rk4),
            "symplectic_leapfrog" | "leapfrog" => Ok(Method::Leapfrog),
            other => Err(Error::config(format!("unknown integration method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IntegrationOptions {
    pub dt: f64,
    pub t_end: f64,
    pub method: Method,
    /// Record every `cadence`-th step (the initial and final states are
    /// always recorded).
    pub cadence: usize,
}

impl IntegrationOptions {
    pub fn rk4(dt: f64, t_end: f64) -> Self {
        IntegrationOptions {
            dt,
            t_end,
            method: Method::Rk4,
            cadence: 1,
        }
    }

    pub fn leapfrog(dt: f64, t_end: f64) -> Self {
        IntegrationOptions {
            method: Method::Leapfrog,
            ..Self::rk4(dt, t_end)
        }
    }

    pub fn with_cadence(mut self, cadence: usize) -> Self {
        self.cadence = cadence.max(1);
        self
    }

    fn validate(&self, model: &SystemModel, t0: f64) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.t_end > t0) {
            return Err(Error::config(format!(
                "end time {} must exceed start time {t0}",
                self.t_end
            )));
        }
        if self.method == Method::Leapfrog && !(model.is_hamiltonian() && model.is_separable()) {
            return Err(Error::config(format!(
                "leapfrog requires a separable Hamiltonian model; `{}` is not",
                model.name()
            )));
        }
        Ok(())
    }

    /// Step sizes from `t0` to `t_end`: full steps, then one shortened step
    /// landing exactly on `t_end`.
    fn schedule(&self, t0: f64) -> (usize, f64) {
        let span = self.t_end - t0;
        let mut full = (span / self.dt).floor() as usize;
        let mut rest = span - full as f64 * self.dt;
        if rest <= 1e-9 * self.dt {
            rest = 0.0;
        }
        if rest >= self.dt * (1.0 - 1e-12) {
            full += 1;
            rest = span - full as f64 * self.dt;
            if rest <= 1e-9 * self.dt {
                rest = 0.0;
            }
        }
        (full, rest)
    }
}

/// Scratch buffers for one stepper.
struct Work {
    k: [Vec<f64>; 8],
    q: Vec<f64>,
    p: Vec<f64>,
}

impl Work {
    fn new(s: usize) -> Self {
        Work {
            k: std::array::from_fn(|_| vec![0.0; s]),
            q: vec![0.0; s],
            p: vec![0.0; s],
        }
    }
}

/// Classical RK4 step of `(q, p)` from `t` to `t + dt` (`dt` may be
/// negative).
pub fn rk4_step(model: &SystemModel, t: f64, q: &mut [f64], p: &mut [f64], dt: f64) {
    let mut w = Work::new(q.len());
    rk4_step_with(model, t, q, p, dt, &mut w);
}

fn rk4_step_with(model: &SystemModel, t: f64, q: &mut [f64], p: &mut [f64], dt: f64, w: &mut Work) {
    let s = q.len();
    let [kq1, kp1, kq2, kp2, kq3, kp3, kq4, kp4] = &mut w.k;
    model.velocity(t, q, p, kq1);
    model.force(t, q, p, kp1);
    for i in 0..s {
        w.q[i] = q[i] + 0.5 * dt * kq1[i];
        w.p[i] = p[i] + 0.5 * dt * kp1[i];
    }
    model.velocity(t + 0.5 * dt, &w.q, &w.p, kq2);
    model.force(t + 0.5 * dt, &w.q, &w.p, kp2);
    for i in 0..s {
        w.q[i] = q[i] + 0.5 * dt * kq2[i];
        w.p[i] = p[i] + 0.5 * dt * kp2[i];
    }
    model.velocity(t + 0.5 * dt, &w.q, &w.p, kq3);
    model.force(t + 0.5 * dt, &w.q, &w.p, kp3);
    for i in 0..s {
        w.q[i] = q[i] + dt * kq3[i];
        w.p[i] = p[i] + dt * kp3[i];
    }
    model.velocity(t + dt, &w.q, &w.p, kq4);
    model.force(t + dt, &w.q, &w.p, kp4);
    for i in 0..s {
        q[i] += dt / 6.0 * (kq1[i] + 2.0 * kq2[i] + 2.0 * kq3[i] + kq4[i]);
        p[i] += dt / 6.0 * (kp1[i] + 2.0 * kp2[i] + 2.0 * kp3[i] + kp4[i]);
    }
}

/// Kick-drift-kick leapfrog step.
pub fn leapfrog_step(model: &SystemModel, t: f64, q: &mut [f64], p: &mut [f64], dt: f64) {
    let mut w = Work::new(q.len());
    leapfrog_step_with(model, t, q, p, dt, &mut w);
}

fn leapfrog_step_with(model: &SystemModel, t: f64, q: &mut [f64], p: &mut [f64], dt: f64, w: &mut Work) {
    let s = q.len();
    let [f, v, ..] = &mut w.k;
    model.force(t, q, p, f);
    for i in 0..s {
        p[i] += 0.5 * dt * f[i];
    }
    model.velocity(t + 0.5 * dt, q, p, v);
    for i in 0..s {
        q[i] += dt * v[i];
    }
    model.force(t + dt, q, p, f);
    for i in 0..s {
        p[i] += 0.5 * dt * f[i];
    }
}

fn step_with(model: &SystemModel, method: Method, t: f64, q: &mut [f64], p: &mut [f64], dt: f64, w: &mut Work) {
    match method {
        Method::Rk4 => rk4_step_with(model, t, q, p, dt, w),
        Method::Leapfrog => leapfrog_step_with(model, t, q, p, dt, w),
    }
}

/// Integrates one system from `s0.t` to `opts.t_end`.
pub fn integrate_trajectory(model: &SystemModel, s0: &PhaseState, opts: &IntegrationOptions) -> Result<Trajectory> {
    s0.check_dim(model)?;
    opts.validate(model, s0.t)?;
    if !s0.is_finite() {
        return Err(Error::contract("initial state is not finite"));
    }
    let (full, rest) = opts.schedule(s0.t);
    let cadence = opts.cadence.max(1);
    let mut w = Work::new(model.dim());
    let mut q = s0.q.clone();
    let mut p = s0.p.clone();
    let mut samples = vec![s0.clone()];
    let steps = full + usize::from(rest > 0.0);
    for k in 0..steps {
        let t = s0.t + k as f64 * opts.dt;
        let (dt, t_next) = if k < full {
            (opts.dt, s0.t + (k + 1) as f64 * opts.dt)
        } else {
            (rest, opts.t_end)
        };
        let (q_prev, p_prev) = (q.clone(), p.clone());
        step_with(model, opts.method, t, &mut q, &mut p, dt, &mut w);
        if !q.iter().chain(&p).all(|v| v.is_finite()) {
            return Err(Error::Blowup {
                t,
                q: q_prev,
                p: p_prev,
            });
        }
        let last = k + 1 == steps;
        if last || (k + 1) % cadence == 0 {
            let t_rec = if last { opts.t_end } else { t_next };
            samples.push(PhaseState::new(t_rec, q.clone(), p.clone()));
        }
    }
    Ok(Trajectory {
        model: model.name().to_string(),
        samples,
    })
}

/// Identical non-interacting systems sharing one time, with sampling
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleCloud {
    pub states: Vec<PhaseState>,
    pub weights: Vec<f64>,
}

impl EnsembleCloud {
    pub fn new(states: Vec<PhaseState>, weights: Vec<f64>) -> Result<Self> {
        if states.len() != weights.len() {
            return Err(Error::contract("one weight per ensemble member is required"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::contract("ensemble weights must be non-negative"));
        }
        if let Some(first) = states.first() {
            if states.iter().any(|s| s.t != first.t) {
                return Err(Error::contract("ensemble members must share one time"));
            }
        }
        Ok(EnsembleCloud { states, weights })
    }

    /// Equal unit weights.
    pub fn uniform(states: Vec<PhaseState>) -> Result<Self> {
        let n = states.len();
        Self::new(states, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Integrates every member independently (in parallel) and returns the
/// cloud at `t_end`, optionally with per-member trajectories. Output order
/// matches input order regardless of scheduling.
pub fn integrate_ensemble(
    model: &SystemModel,
    cloud: &EnsembleCloud,
    opts: &IntegrationOptions,
    keep_trajectories: bool,
) -> Result<(EnsembleCloud, Option<Vec<Trajectory>>)> {
    let results: Vec<Result<Trajectory>> = cloud
        .states
        .par_iter()
        .map(|s0| {
            let mut tr = integrate_trajectory(model, s0, opts)?;
            if !keep_trajectories {
                let last = tr.samples.pop().expect("non-empty");
                tr.samples = vec![last];
            }
            Ok(tr)
        })
        .collect();
    let mut trajectories = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(tr) => trajectories.push(tr),
            Err(e) => {
                return Err(Error::Member {
                    index,
                    source: Box::new(e),
                })
            }
        }
    }
    let states = trajectories.iter().map(|tr| tr.last().clone()).collect();
    let out = EnsembleCloud {
        states,
        weights: cloud.weights.clone(),
    };
    Ok((out, keep_trajectories.then_some(trajectories)))
}

// ---------------------------------------------------------------------------
// Flow-map diagnostics

/// Characteristics launched from every node of a label grid, advanced in
/// lockstep so the flow-map Jacobian can be differenced at any time.
pub struct FlowMap<'m> {
    model: &'m SystemModel,
    labels: GridSpec,
    pub t: f64,
    /// Node-major positions `q[node * s + k]`.
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl<'m> FlowMap<'m> {
    /// `p0` must hold `s` components on `grid`.
    pub fn new(model: &'m SystemModel, grid: &GridSpec, p0: &GridField, t0: f64) -> Result<Self> {
        let s = model.dim();
        if grid.dims() != s || p0.components != s || p0.spec != *grid {
            return Err(Error::contract(
                "flow map needs an s-dimensional grid and an s-component momentum field on it",
            ));
        }
        let n = grid.node_count();
        let mut q = vec![0.0; n * s];
        let mut p = vec![0.0; n * s];
        for node in 0..n {
            grid.coords_into(node, &mut q[node * s..(node + 1) * s]);
            for k in 0..s {
                p[node * s + k] = p0.get(k, node);
            }
        }
        let labels = outflow_labels(grid)?;
        Ok(FlowMap {
            model,
            labels,
            t: t0,
            q,
            p,
        })
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Advances every characteristic by one RK4 step.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        let s = self.dim();
        let t = self.t;
        let model = self.model;
        let failed = self
            .q
            .par_chunks_mut(s)
            .zip(self.p.par_chunks_mut(s))
            .map_init(
                || Work::new(s),
                |w, (q, p)| {
                    rk4_step_with(model, t, q, p, dt, w);
                    q.iter().chain(p.iter()).all(|v| v.is_finite())
                },
            )
            .any(|ok| !ok);
        if failed {
            return Err(Error::Blowup {
                t,
                q: vec![],
                p: vec![],
            });
        }
        self.t += dt;
        Ok(())
    }

    /// `det(∂q(t)/∂q0)` at every label node.
    pub fn determinant(&self) -> GridField {
        flow_determinant(&self.labels, &self.q, self.t)
    }
}

/// Copy of `grid` with every axis treated as outflow, so label-space
/// differences never wrap.
pub(crate) fn outflow_labels(grid: &GridSpec) -> Result<GridSpec> {
    GridSpec::new(
        grid.axes()
            .iter()
            .map(|a| crate::grid::Axis::new(a.min, a.max, a.nodes, Boundary::Outflow))
            .collect(),
    )
}

/// Determinant of `∂q/∂q0` from node-major positions over a label grid.
pub(crate) fn flow_determinant(labels: &GridSpec, positions: &[f64], t: f64) -> GridField {
    let s = labels.dims();
    let n = labels.node_count();
    let mut field = GridField::zeros(labels, s, t);
    for node in 0..n {
        for k in 0..s {
            field.set(k, node, positions[node * s + k]);
        }
    }
    let mut jac = vec![vec![]; s * s];
    for a in 0..s {
        for b in 0..s {
            jac[a * s + b] = field.derivative(a, b);
        }
    }
    let mut det = GridField::zeros(labels, 1, t);
    for node in 0..n {
        det.values[node] = if s == 1 {
            jac[0][node]
        } else {
            DMatrix::from_fn(s, s, |a, b| jac[a * s + b][node]).determinant()
        };
    }
    det
}

/// Flow-map determinant `det(∂q(t)/∂q0)` on the label grid after
/// integrating every node's characteristic from `t0` to `t`.
pub fn flow_map_jacobian(
    model: &SystemModel,
    grid: &GridSpec,
    p0: &GridField,
    t0: f64,
    t: f64,
    dt: f64,
) -> Result<GridField> {
    let mut fm = FlowMap::new(model, grid, p0, t0)?;
    advance_to(&mut fm, t, dt)?;
    Ok(fm.determinant())
}

fn advance_to(fm: &mut FlowMap<'_>, t: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::config("time step must be positive"));
    }
    let t0 = fm.t;
    let steps = ((t - t0) / dt - 1e-9).ceil().max(0.0) as usize;
    for k in 0..steps {
        let target = if k + 1 == steps { t } else { t0 + (k + 1) as f64 * dt };
        let h = target - fm.t;
        fm.step(h)?;
        fm.t = target;
    }
    Ok(())
}

/// Minimum flow-map determinant sampled every step from `t0` to `t_max`.
#[derive(Debug, Clone)]
pub struct DeterminantHistory {
    pub times: Vec<f64>,
    pub min_det: Vec<f64>,
}

impl DeterminantHistory {
    /// First time the minimum determinant reaches zero, linearly
    /// interpolated between samples.
    pub fn first_zero(&self) -> Option<f64> {
        first_crossing(&self.times, &self.min_det, 0.0)
    }
}

pub(crate) fn first_crossing(times: &[f64], values: &[f64], level: f64) -> Option<f64> {
    for i in 1..values.len() {
        let (a, b) = (values[i - 1] - level, values[i] - level);
        if a > 0.0 && b <= 0.0 {
            return Some(times[i - 1] + (times[i] - times[i - 1]) * a / (a - b));
        }
    }
    None
}

/// Tracks the flow-map determinant, stopping early once it changes sign.
pub fn determinant_history(
    model: &SystemModel,
    grid: &GridSpec,
    p0: &GridField,
    t0: f64,
    t_max: f64,
    dt: f64,
) -> Result<DeterminantHistory> {
    let mut fm = FlowMap::new(model, grid, p0, t0)?;
    let min = |f: &GridField| f.values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut times = vec![t0];
    let mut min_det = vec![min(&fm.determinant())];
    while fm.t < t_max - 1e-12 {
        let h = dt.min(t_max - fm.t);
        fm.step(h)?;
        times.push(fm.t);
        min_det.push(min(&fm.determinant()));
        if *min_det.last().unwrap() <= 0.0 {
            break;
        }
    }
    Ok(DeterminantHistory { times, min_det })
}

// ---------------------------------------------------------------------------
// Trajectories from an action field

/// Integrates `dq/dt = ∇S(t, q)/m` with RK4. Momenta are reported as
/// `m · velocity`.
pub fn characteristics_from_action(
    action: &dyn ActionGradient,
    m: f64,
    q0: &[f64],
    t0: f64,
    dt: f64,
    t_end: f64,
) -> Result<Trajectory> {
    if !(m > 0.0) {
        return Err(Error::config(format!("mass must be positive, got {m}")));
    }
    if !(dt > 0.0) || !(t_end > t0) {
        return Err(Error::config("need dt > 0 and t_end > t0"));
    }
    let s = q0.len();
    let velocity = |t: f64, q: &[f64], out: &mut [f64]| -> Result<()> {
        action.gradient(t, q, out).map_err(|e| match e {
            Error::DomainExit { .. } => Error::DomainExit { t },
            other => other,
        })?;
        for v in out.iter_mut() {
            *v /= m;
        }
        Ok(())
    };
    let mut q = q0.to_vec();
    let mut v = vec![0.0; s];
    velocity(t0, &q, &mut v)?;
    let mut samples = vec![PhaseState::new(t0, q.clone(), v.iter().map(|x| m * x).collect())];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; s], vec![0.0; s], vec![0.0; s], vec![0.0; s]);
    let mut tmp = vec![0.0; s];
    let mut t = t0;
    let mut k = 0usize;
    while t < t_end - 1e-12 * dt {
        let h = dt.min(t_end - t);
        velocity(t, &q, &mut k1)?;
        for i in 0..s {
            tmp[i] = q[i] + 0.5 * h * k1[i];
        }
        velocity(t + 0.5 * h, &tmp, &mut k2)?;
        for i in 0..s {
            tmp[i] = q[i] + 0.5 * h * k2[i];
        }
        velocity(t + 0.5 * h, &tmp, &mut k3)?;
        for i in 0..s {
            tmp[i] = q[i] + h * k3[i];
        }
        velocity(t + h, &tmp, &mut k4)?;
        for i in 0..s {
            q[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        k += 1;
        t = if h < dt { t_end } else { t0 + k as f64 * dt };
        velocity(t, &q, &mut v)?;
        samples.push(PhaseState::new(t, q.clone(), v.iter().map(|x| m * x).collect()));
    }
    Ok(Trajectory {
        model: "action".into(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use std::f64::consts::PI;

    #[test]
    fn free_particle_is_exact() {
        let m = model::free_particle(1, 1.0).unwrap();
        let tr = integrate_trajectory(&m, &PhaseState::new(0.0, vec![0.0], vec![2.0]), &IntegrationOptions::rk4(0.1, 3.0)).unwrap();
        let last = tr.last();
        assert_eq!(last.t, 3.0);
        assert!((last.q[0] - 6.0).abs() < 1e-12);
        assert_eq!(last.p[0], 2.0);
    }

    #[test]
    fn harmonic_oscillator_returns_after_period() {
        let m = model::harmonic_oscillator(1, 1.0, 1.0).unwrap();
        let tr = integrate_trajectory(&m, &PhaseState::new(0.0, vec![0.0], vec![1.0]), &IntegrationOptions::rk4(1e-3, 2.0 * PI)).unwrap();
        assert!(tr.last().q[0].abs() < 1e-8);
        assert!((tr.last().t - 2.0 * PI).abs() < 1e-15);
    }

    #[test]
    fn damped_momentum_decays_exponentially() {
        let m = model::damped_free_particle(1, 1.0, 1.0).unwrap();
        let tr = integrate_trajectory(&m, &PhaseState::new(0.0, vec![0.0], vec![1.0]), &IntegrationOptions::rk4(1e-3, 2.0)).unwrap();
        for s in &tr.samples {
            assert!((s.p[0] - (-s.t).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn last_step_is_shortened_and_cadence_respected() {
        let m = model::free_particle(1, 1.0).unwrap();
        let tr = integrate_trajectory(
            &m,
            &PhaseState::new(0.0, vec![0.0], vec![1.0]),
            &IntegrationOptions::rk4(0.3, 1.0).with_cadence(2),
        )
        .unwrap();
        let times: Vec<f64> = tr.times().collect();
        assert_eq!(times.len(), 3);
        assert_eq!(times[0], 0.0);
        assert!((times[1] - 0.6).abs() < 1e-15);
        assert_eq!(*times.last().unwrap(), 1.0);
        assert!(times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn leapfrog_rejected_for_non_separable_models() {
        let m = model::damped_free_particle(1, 1.0, 0.3).unwrap();
        let err = integrate_trajectory(&m, &PhaseState::new(0.0, vec![0.0], vec![1.0]), &IntegrationOptions::leapfrog(0.1, 1.0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn blowup_reports_last_good_state() {
        use std::sync::Arc;
        let u: model::ScalarField = Arc::new(|_, q| -q[0].powi(4));
        let g: model::VectorField = Arc::new(|_, q, out| out[0] = -4.0 * q[0].powi(3));
        let m = model::potential_particle(1, 1.0, u, g).unwrap();
        let err = integrate_trajectory(&m, &PhaseState::new(0.0, vec![1.0], vec![0.0]), &IntegrationOptions::rk4(0.1, 100.0)).unwrap_err();
        match err {
            Error::Blowup { q, .. } => assert!(q[0].is_finite()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ensemble_examples() {
        let free = model::free_particle(1, 1.0).unwrap();
        let cloud = EnsembleCloud::uniform(vec![
            PhaseState::new(0.0, vec![0.0], vec![1.0]),
            PhaseState::new(0.0, vec![0.0], vec![2.0]),
        ])
        .unwrap();
        let (out, _) = integrate_ensemble(&free, &cloud, &IntegrationOptions::rk4(0.01, 1.0), false).unwrap();
        assert!((out.states[0].q[0] - 1.0).abs() < 1e-12);
        assert!((out.states[1].q[0] - 2.0).abs() < 1e-12);
        assert_eq!(out.weights, cloud.weights);

        let ho = model::harmonic_oscillator(1, 1.0, 1.0).unwrap();
        let states: Vec<_> = (0..21).map(|i| PhaseState::new(0.0, vec![-1.0 + 0.1 * i as f64], vec![0.0])).collect();
        let cloud = EnsembleCloud::uniform(states).unwrap();
        let (out, _) = integrate_ensemble(&ho, &cloud, &IntegrationOptions::rk4(1e-3, PI / 2.0), false).unwrap();
        for s in &out.states {
            assert!(s.q[0].abs() < 1e-10);
        }
    }

    #[test]
    fn ensemble_matches_individual_runs_bitwise() {
        let ho = model::harmonic_oscillator(1, 1.0, 1.0).unwrap();
        let states: Vec<_> = (0..1000)
            .map(|i| PhaseState::new(0.0, vec![(i as f64 * 0.7).sin()], vec![(i as f64 * 1.3).cos()]))
            .collect();
        let opts = IntegrationOptions::rk4(1e-2, 1.0);
        let cloud = EnsembleCloud::uniform(states.clone()).unwrap();
        let (out, _) = integrate_ensemble(&ho, &cloud, &opts, false).unwrap();
        for (s0, s1) in states.iter().zip(&out.states) {
            let single = integrate_trajectory(&ho, s0, &opts).unwrap();
            assert_eq!(single.last(), s1);
        }
    }

    #[test]
    fn ensemble_error_names_member() {
        use std::sync::Arc;
        let u: model::ScalarField = Arc::new(|_, q| -q[0].powi(4));
        let g: model::VectorField = Arc::new(|_, q, out| out[0] = -4.0 * q[0].powi(3));
        let m = model::potential_particle(1, 1.0, u, g).unwrap();
        let cloud = EnsembleCloud::uniform(vec![
            PhaseState::new(0.0, vec![0.0], vec![0.0]),
            PhaseState::new(0.0, vec![2.0], vec![0.0]),
        ])
        .unwrap();
        let err = integrate_ensemble(&m, &cloud, &IntegrationOptions::rk4(0.1, 50.0), false).unwrap_err();
        assert!(matches!(err, Error::Member { index: 1, .. }), "{err}");
    }

    #[test]
    fn flow_map_examples() {
        let grid = GridSpec::line(-1.0, 1.0, 41).unwrap();
        let free = model::free_particle(1, 1.0).unwrap();
        let uniform = GridField::scalar_from_fn(&grid, 0.0, |_| 0.7);
        let det = flow_map_jacobian(&free, &grid, &uniform, 0.0, 2.0, 0.01).unwrap();
        assert!(det.values.iter().all(|d| (d - 1.0).abs() < 1e-12));

        let focusing = GridField::scalar_from_fn(&grid, 0.0, |x| -x[0]);
        let det = flow_map_jacobian(&free, &grid, &focusing, 0.0, 0.4, 0.01).unwrap();
        assert!(det.values.iter().all(|d| (d - 0.6).abs() < 1e-12));
        let hist = determinant_history(&free, &grid, &focusing, 0.0, 2.0, 0.01).unwrap();
        assert!((hist.first_zero().unwrap() - 1.0).abs() < 1e-9);

        let ho = model::harmonic_oscillator(1, 1.0, 1.0).unwrap();
        let rest = GridField::scalar_from_fn(&grid, 0.0, |_| 0.0);
        let det = flow_map_jacobian(&ho, &grid, &rest, 0.0, 1.0, 1e-3).unwrap();
        assert!(det.values.iter().all(|d| (d - 1f64.cos()).abs() < 1e-10));
        let hist = determinant_history(&ho, &grid, &rest, 0.0, 3.0, 1e-3).unwrap();
        assert!((hist.first_zero().unwrap() - PI / 2.0).abs() < 0.01);
    }
}
