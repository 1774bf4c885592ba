//! Momentum-space description: the coordinate field `q(t, p)`, density
//! over momenta, the Hamilton-Jacobi equation for `Φ(t, p)` and the Jacobi
//! theorem with momenta as unknowns. Coordinates are always recovered as
//! `q = −∂Φ/∂p`.

use std::sync::Arc;

use crate::advect::{self, DensityReport, StepReport};
use crate::error::{Error, Result};
use crate::expr::{self, Bindings, Symbols, Var};
use crate::grid::{Axes, GridField};
use crate::hj::{solve_jacobi, CompleteIntegral};
use crate::lagrangian::{PhaseState, Trajectory};
use crate::model::SystemModel;

fn check_q_field(model: &SystemModel, q_field: &GridField) -> Result<()> {
    if q_field.components != model.dim() || q_field.dims() != model.dim() {
        return Err(Error::contract(format!(
            "coordinate field must have {} components over {} momentum axes",
            model.dim(),
            model.dim()
        )));
    }
    Ok(())
}

/// `ω(p) = F(t, q(p), p)` at every node.
pub fn momentum_space_velocity(model: &SystemModel, q_field: &GridField, t: f64) -> Result<GridField> {
    check_q_field(model, q_field)?;
    let speed = |t: f64, p: &[f64], q: &[f64], out: &mut [f64]| model.force(t, q, p, out);
    let mut w = advect::speed_field(q_field, &speed, t);
    w.t = t;
    Ok(w.with_axes(Axes::P))
}

/// One semi-Lagrangian step of `∂q/∂t + (ω·∇_p) q = φ`.
pub fn step_coordinate_field(model: &SystemModel, q_field: &GridField, dt: f64) -> Result<(GridField, StepReport)> {
    check_q_field(model, q_field)?;
    let speed = |t: f64, p: &[f64], q: &[f64], out: &mut [f64]| model.force(t, q, p, out);
    let source = |t: f64, p: &[f64], q: &[f64], out: &mut [f64]| model.velocity(t, q, p, out);
    let (next, rep) = advect::semi_lagrangian_step(q_field, &speed, &source, dt)?;
    Ok((next.with_axes(Axes::P), rep))
}

/// Conservative step of `∂ρ/∂t + ∇_p·(ρ ω) = 0`.
pub fn step_density_p(omega: &GridField, rho_p: &GridField, dt: f64) -> Result<(GridField, DensityReport)> {
    let (r, rep) = advect::conservative_step(omega, rho_p, dt)?;
    Ok((r.with_axes(Axes::P), rep))
}

type PScalar = Arc<dyn Fn(f64, &[f64]) -> Result<f64> + Send + Sync>;
type PVector = Arc<dyn Fn(f64, &[f64], &mut [f64]) -> Result<()> + Send + Sync>;

/// Momentum-space action `Φ(t, p)` with exact derivatives, given either as
/// an expression or as closures.
#[derive(Clone)]
pub struct MomentumAction {
    dims: usize,
    value: PScalar,
    dt: PScalar,
    grad: PVector,
}

impl std::fmt::Debug for MomentumAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentumAction").field("dims", &self.dims).finish_non_exhaustive()
    }
}

impl MomentumAction {
    /// Parses `Φ` over `t` and `p1..ps`.
    pub fn parse(dims: usize, text: &str) -> Result<Self> {
        let e = expr::parse(text, Symbols::phase(dims))?;
        if let Some(k) = (0..dims).find(|&k| e.depends_on(Var::Q(k))) {
            return Err(Error::config(format!(
                "momentum-space action must not depend on coordinate q{}",
                k + 1
            )));
        }
        let dt = e.derivative(Var::T);
        let grad: Vec<_> = (0..dims).map(|k| e.derivative(Var::P(k))).collect();
        Ok(MomentumAction {
            dims,
            value: Arc::new(move |t, p| e.eval(&Bindings::new(t, &[], p))),
            dt: Arc::new(move |t, p| dt.eval(&Bindings::new(t, &[], p))),
            grad: Arc::new(move |t, p, out| {
                let b = Bindings::new(t, &[], p);
                for (o, g) in out.iter_mut().zip(&grad) {
                    *o = g.eval(&b)?;
                }
                Ok(())
            }),
        })
    }

    pub fn from_fns(
        dims: usize,
        value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        dt: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        MomentumAction {
            dims,
            value: Arc::new(move |t, p| Ok(value(t, p))),
            dt: Arc::new(move |t, p| Ok(dt(t, p))),
            grad: Arc::new(move |t, p, out| {
                grad(t, p, out);
                Ok(())
            }),
        }
    }

    pub fn dim(&self) -> usize {
        self.dims
    }

    pub fn value(&self, t: f64, p: &[f64]) -> Result<f64> {
        (self.value)(t, p)
    }

    /// `q = −∂Φ/∂p`
    pub fn coordinates(&self, t: f64, p: &[f64]) -> Result<Vec<f64>> {
        let mut q = vec![0.0; self.dims];
        (self.grad)(t, p, &mut q)?;
        for v in q.iter_mut() {
            *v = -*v;
        }
        Ok(q)
    }
}

fn require_energy(model: &SystemModel, t: f64, q: &[f64], p: &[f64]) -> Result<f64> {
    model
        .energy(t, q, p)
        .ok_or_else(|| Error::contract(format!("model `{}` carries no Hamiltonian", model.name())))
}

/// `∂Φ/∂t + H(t, −∂Φ/∂p, p)` with exact derivatives.
pub fn hj_residual_p(model: &SystemModel, phi: &MomentumAction, t: f64, p: &[f64]) -> Result<f64> {
    let q = phi.coordinates(t, p)?;
    Ok((phi.dt)(t, p)? + require_energy(model, t, &q, p)?)
}

/// Snapshot-pair residual at a node, evaluated at the time midpoint.
pub fn hj_residual_p_snapshots(model: &SystemModel, phi0: &GridField, phi1: &GridField, node: usize) -> Result<f64> {
    if phi0.spec != phi1.spec || phi0.components != 1 || !(phi1.t > phi0.t) {
        return Err(Error::contract("residual needs two increasing scalar snapshots on one grid"));
    }
    let s = phi0.dims();
    let mut q = vec![0.0; s];
    for (k, qk) in q.iter_mut().enumerate() {
        *qk = -0.5 * (phi0.central_diff(0, node, k)? + phi1.central_diff(0, node, k)?);
    }
    let t = 0.5 * (phi0.t + phi1.t);
    let p = phi0.spec.coords(node);
    let dphi = (phi1.get(0, node) - phi0.get(0, node)) / (phi1.t - phi0.t);
    Ok(dphi + require_energy(model, t, &q, &p)?)
}

fn require_stationary(model: &SystemModel) -> Result<()> {
    if model.is_time_dependent() {
        return Err(Error::contract(format!(
            "truncated equation needs a time-independent Hamiltonian; `{}` depends on t",
            model.name()
        )));
    }
    Ok(())
}

/// `H(−∂W/∂p, p) − E` at a momentum point, exact derivatives.
pub fn truncated_hj_residual_p(model: &SystemModel, w: &MomentumAction, energy: f64, p: &[f64]) -> Result<f64> {
    require_stationary(model)?;
    let q = w.coordinates(0.0, p)?;
    Ok(require_energy(model, 0.0, &q, p)? - energy)
}

/// Residual field of the truncated equation for a sampled `W(p)`; nodes
/// without a central stencil are flagged invalid.
pub fn truncated_hj_residual_p_field(model: &SystemModel, w: &GridField, energy: f64) -> Result<GridField> {
    require_stationary(model)?;
    if w.components != 1 || w.dims() != model.dim() {
        return Err(Error::contract("W must be a scalar field over the model's momentum space"));
    }
    let spec = &w.spec;
    let s = spec.dims();
    let n = spec.node_count();
    let mut out = GridField::zeros(spec, 1, w.t).with_axes(Axes::P);
    let mut invalid = vec![false; n];
    let mut q = vec![0.0; s];
    for node in 0..n {
        let mut ok = true;
        for (k, qk) in q.iter_mut().enumerate() {
            match w.central_diff(0, node, k) {
                Ok(d) => *qk = -d,
                Err(_) => ok = false,
            }
        }
        if !ok {
            invalid[node] = true;
            continue;
        }
        let p = spec.coords(node);
        out.values[node] = require_energy(model, 0.0, &q, &p)? - energy;
    }
    out.invalid = Some(invalid);
    Ok(out)
}

/// Recovers `p(t)` from `∂Φ/∂β = α` (p-representation) with
/// `q = −∂Φ/∂p`.
pub fn jacobi_recover_p(
    ci: &CompleteIntegral,
    beta: &[f64],
    alpha: &[f64],
    t_grid: &[f64],
    seed: &[f64],
) -> Result<Trajectory> {
    if ci.axes != Axes::P {
        return Err(Error::contract("p-recovery needs a p-representation complete integral"));
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("time grid must be non-empty and strictly increasing"));
    }
    let s = ci.dims;
    if beta.len() != s || alpha.len() != s || seed.len() != s {
        return Err(Error::contract("β, α and the seed need one entry per degree of freedom"));
    }
    let mut p = seed.to_vec();
    let mut samples = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        p = solve_jacobi(ci, t, beta, alpha, &p)?;
        let mut q = vec![0.0; s];
        ci.x_partials(t, &p, beta, &mut q);
        for v in q.iter_mut() {
            *v = -*v;
        }
        samples.push(PhaseState::new(t, q, p.clone()));
    }
    Ok(Trajectory {
        model: "jacobi-p".into(),
        samples,
    })
}

/// Snapshot of the momentum-space fields.
#[derive(Debug, Clone)]
pub struct MomentumSnapshot {
    pub q: GridField,
    pub rho: Option<GridField>,
}

/// Evolves `q(t, p)` (and `ρ(t, p)` when given) to `t_end`, keeping every
/// `cadence`-th step plus the first and last.
pub fn run_momentum_representation(
    model: &SystemModel,
    q0: &GridField,
    rho0: Option<&GridField>,
    dt: f64,
    t_end: f64,
    cadence: usize,
) -> Result<Vec<MomentumSnapshot>> {
    check_q_field(model, q0)?;
    if !(dt > 0.0) || !(t_end > q0.t) {
        return Err(Error::config("need dt > 0 and t_end beyond the initial time"));
    }
    let mut q = q0.clone().with_axes(Axes::P);
    let mut rho = rho0.map(|r| r.clone().with_axes(Axes::P));
    let mut out = vec![MomentumSnapshot {
        q: q.clone(),
        rho: rho.clone(),
    }];
    let tol = 1e-12 * t_end.abs().max(1.0);
    let mut step = 0usize;
    while q.t < t_end - tol {
        let h = dt.min(t_end - q.t);
        if let Some(r) = &rho {
            let omega = momentum_space_velocity(model, &q, q.t)?;
            rho = Some(step_density_p(&omega, r, h)?.0);
        }
        q = step_coordinate_field(model, &q, h)?.0;
        if let Some(r) = rho.as_mut() {
            r.t = q.t;
        }
        step += 1;
        if step % cadence.max(1) == 0 || q.t >= t_end - tol {
            out.push(MomentumSnapshot {
                q: q.clone(),
                rho: rho.clone(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    #[test]
    fn free_coordinate_field_translates() {
        use crate::grid::GridSpec;
        let model = crate::model::free_particle(1, 2.0).unwrap();
        let spec = GridSpec::line(-1.0, 1.0, 21).unwrap();
        let q0 = GridField::scalar_from_fn(&spec, 0.0, |p| 0.3 * p[0]);
        let rho0 = GridField::scalar_from_fn(&spec, 0.0, |_| 1.0);
        let run = super::run_momentum_representation(&model, &q0, Some(&rho0), 0.1, 1.0, 5).unwrap();
        assert_eq!(run.len(), 3);
        let last = run.last().unwrap();
        for node in 0..21 {
            let p = spec.coords(node)[0];
            assert!((last.q.get(0, node) - (0.3 * p + p / 2.0)).abs() < 1e-12);
            assert_eq!(last.rho.as_ref().unwrap().get(0, node), 1.0);
        }
    }

    use super::*;
    use crate::grid::{Axis, GridSpec};
    use crate::model;

    fn pline(min: f64, max: f64, n: usize) -> GridSpec {
        GridSpec::line(min, max, n).unwrap()
    }

    #[test]
    fn omega_examples() {
        let spec = pline(-1.0, 1.0, 11);
        let q = GridField::scalar_from_fn(&spec, 0.0, |p| p[0]).with_axes(Axes::P);
        let free = model::free_particle(1, 1.0).unwrap();
        assert!(momentum_space_velocity(&free, &q, 0.0).unwrap().values.iter().all(|w| *w == 0.0));
        let uf = model::uniform_force(1.0, 2.0).unwrap();
        assert!(momentum_space_velocity(&uf, &q, 0.0).unwrap().values.iter().all(|w| *w == 2.0));
        let ho = model::harmonic_oscillator(1, 1.0, 1.0).unwrap();
        let w = momentum_space_velocity(&ho, &q, 0.0).unwrap();
        for node in 0..11 {
            assert_eq!(w.get(0, node), -spec.coords(node)[0]);
        }
        assert_eq!(w.axes, Axes::P);
    }

    #[test]
    fn free_coordinate_field_is_pure_source() {
        let spec = pline(-2.0, 2.0, 41);
        let free = model::free_particle(1, 2.0).unwrap();
        let mut q = GridField::zeros(&spec, 1, 0.0).with_axes(Axes::P);
        for _ in 0..50 {
            q = step_coordinate_field(&free, &q, 0.02).unwrap().0;
        }
        for node in 0..spec.node_count() {
            let p = spec.coords(node)[0];
            assert!((q.get(0, node) - p * q.t / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_force_coordinate_field() {
        // orbits p = p0 + t, q = p0 t + t²/2 give q(t, p) = p t − t²/2
        let spec = pline(-2.0, 3.0, 101);
        let uf = model::uniform_force(1.0, 1.0).unwrap();
        let mut q = GridField::zeros(&spec, 1, 0.0).with_axes(Axes::P);
        for _ in 0..50 {
            q = step_coordinate_field(&uf, &q, 0.02).unwrap().0;
        }
        let t = q.t;
        for node in 10..spec.node_count() {
            let p = spec.coords(node)[0];
            assert!((q.get(0, node) - (p * t - t * t / 2.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn density_p_translation_conserves_mass() {
        let spec = GridSpec::new(vec![Axis::periodic(-1.0, 1.0, 40)]).unwrap();
        let rho = GridField::scalar_from_fn(&spec, 0.0, |p| (-4.0 * p[0] * p[0]).exp()).with_axes(Axes::P);
        let omega = GridField::scalar_from_fn(&spec, 0.0, |_| 0.5);
        let mut r = rho.clone();
        for _ in 0..200 {
            r = step_density_p(&omega, &r, 0.02).unwrap().0;
        }
        assert!((r.integral(0) - rho.integral(0)).abs() < 1e-14);
        let zero = GridField::zeros(&spec, 1, 0.0);
        assert_eq!(step_density_p(&zero, &rho, 0.1).unwrap().0.values, rho.values);
    }

    #[test]
    fn residual_examples() {
        let free = model::free_particle(1, 2.0).unwrap();
        let phi = MomentumAction::parse(1, "-p1^2*t/(2*2)").unwrap();
        assert_eq!(hj_residual_p(&free, &phi, 0.7, &[1.3]).unwrap(), 0.0);
        let constant = MomentumAction::parse(1, "5").unwrap();
        assert!((hj_residual_p(&free, &constant, 0.0, &[1.5]).unwrap() - 1.5 * 1.5 / 4.0).abs() < 1e-15);

        let (f0, m, e) = (1.5, 2.0, 0.7);
        let uf = model::uniform_force(m, f0).unwrap();
        let phi = MomentumAction::parse(1, &format!("-{e}*t + {e}*p1/{f0} - p1^3/(6*{m}*{f0})")).unwrap();
        for &p in &[-1.0, 0.2, 2.5] {
            assert!(hj_residual_p(&uf, &phi, 0.4, &[p]).unwrap().abs() < 1e-14);
        }
        let w = MomentumAction::parse(1, &format!("{e}*p1/{f0} - p1^3/(6*{m}*{f0})")).unwrap();
        assert!(truncated_hj_residual_p(&uf, &w, e, &[0.9]).unwrap().abs() < 1e-14);
    }

    #[test]
    fn truncated_free_particle_reports_mismatch() {
        let spec = pline(-1.0, 1.0, 21).clone();
        let free = model::free_particle(1, 1.0).unwrap();
        let w = GridField::zeros(&spec, 1, 0.0).with_axes(Axes::P);
        let r = truncated_hj_residual_p_field(&free, &w, 0.1).unwrap();
        for node in 1..20 {
            let p = spec.coords(node)[0];
            assert!((r.get(0, node) - (p * p / 2.0 - 0.1)).abs() < 1e-15);
        }
        assert!(!r.is_valid(0));
    }

    #[test]
    fn recover_p_examples() {
        let (f0, m) = (2.0, 1.0);
        let ci = CompleteIntegral::parse(1, Axes::P, &format!("-b1*t + b1*p1/{f0} - p1^3/(6*{m}*{f0})")).unwrap();
        let times: Vec<f64> = (0..=10).map(|i| 0.1 * i as f64).collect();
        let (e, alpha) = (0.3, 0.25);
        let tr = jacobi_recover_p(&ci, &[e], &[alpha], &times, &[0.0]).unwrap();
        for s in &tr.samples {
            let p = f0 * (s.t + alpha);
            assert!((s.p[0] - p).abs() < 1e-12);
            assert!((s.q[0] - (-e / f0 + p * p / (2.0 * m * f0))).abs() < 1e-12);
        }

        let ci = CompleteIntegral::parse(1, Axes::P, "-p1^2*t/2 + b1*p1").unwrap();
        let tr = jacobi_recover_p(&ci, &[0.4], &[1.5], &times, &[0.0]).unwrap();
        for s in &tr.samples {
            assert!((s.p[0] - 1.5).abs() < 1e-12);
            assert!((s.q[0] - (1.5 * s.t - 0.4)).abs() < 1e-12);
        }
    }
}
