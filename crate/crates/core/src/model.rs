//! Dynamical systems `dp/dt = F(t, q, p)`, `dq/dt = φ(t, q, p)` and the
//! bundled model library.
//!
//! Every model is immutable after construction. Force and velocity maps are
//! plain `Fn` closures over the current `(t, q, p)` only, so a model cannot
//! carry history and may be evaluated from many threads at once.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::expr::{self, Bindings, Expr, Symbols, Var};

/// `(t, q, p) -> out[s]`
pub type PhaseMap = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, q, p) -> scalar`
pub type PhaseScalar = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// `(t, q) -> scalar`
pub type ScalarField = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, q) -> out[s]`
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// A Hamiltonian with its partial derivatives.
#[derive(Clone)]
pub struct Hamiltonian {
    pub energy: PhaseScalar,
    pub dh_dq: PhaseMap,
    pub dh_dp: PhaseMap,
}

/// One system of the ensemble.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    dim: usize,
    force: PhaseMap,
    velocity: PhaseMap,
    hamiltonian: Option<Hamiltonian>,
    is_hamiltonian: bool,
    separable: bool,
    time_dependent: bool,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("is_hamiltonian", &self.is_hamiltonian)
            .field("separable", &self.separable)
            .field("time_dependent", &self.time_dependent)
            .finish()
    }
}

impl SystemModel {
    /// Generic constructor. Prefer the named constructors below; this one
    /// performs no consistency audit.
    pub fn new(name: impl Into<String>, dim: usize, force: PhaseMap, velocity: PhaseMap) -> Self {
        SystemModel {
            name: name.into(),
            dim,
            force,
            velocity,
            hamiltonian: None,
            is_hamiltonian: false,
            separable: false,
            time_dependent: true,
        }
    }

    pub fn with_hamiltonian(mut self, h: Hamiltonian) -> Self {
        self.hamiltonian = Some(h);
        self.is_hamiltonian = true;
        self
    }

    /// Declares that `F` depends on `(t, q)` only and `φ` on `p` only, which
    /// admits the leapfrog integrator.
    pub fn separable(mut self, yes: bool) -> Self {
        self.separable = yes;
        self
    }

    pub fn time_dependent(mut self, yes: bool) -> Self {
        self.time_dependent = yes;
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_hamiltonian(&self) -> bool {
        self.is_hamiltonian
    }

    pub fn is_separable(&self) -> bool {
        self.separable
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time_dependent
    }

    pub fn hamiltonian(&self) -> Option<&Hamiltonian> {
        self.hamiltonian.as_ref()
    }

    #[inline]
    pub fn force(&self, t: f64, q: &[f64], p: &[f64], out: &mut [f64]) {
        (self.force)(t, q, p, out)
    }

    #[inline]
    pub fn velocity(&self, t: f64, q: &[f64], p: &[f64], out: &mut [f64]) {
        (self.velocity)(t, q, p, out)
    }

    pub fn energy(&self, t: f64, q: &[f64], p: &[f64]) -> Option<f64> {
        self.hamiltonian.as_ref().map(|h| (h.energy)(t, q, p))
    }

    fn require_hamiltonian(&self) -> Result<&Hamiltonian> {
        self.hamiltonian.as_ref().ok_or_else(|| {
            Error::contract(format!("model `{}` carries no Hamiltonian", self.name))
        })
    }

    /// Checks `φ = ∂H/∂p` and `F = -∂H/∂q` against central differences of
    /// `H` at seeded random sample points.
    pub fn audit_hamiltonian(&self, cfg: &AuditConfig) -> Result<AuditReport> {
        let h = self.require_hamiltonian()?;
        let s = self.dim;
        let mut report = AuditReport::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (mut q, mut p) = (vec![0.0; s], vec![0.0; s]);
        let (mut vel, mut force) = (vec![0.0; s], vec![0.0; s]);
        for _ in 0..cfg.samples {
            let t = rng.gen_range(cfg.t_range.0..=cfg.t_range.1);
            for k in 0..s {
                q[k] = rng.gen_range(-cfg.half_width..=cfg.half_width);
                p[k] = rng.gen_range(-cfg.half_width..=cfg.half_width);
            }
            self.velocity(t, &q, &p, &mut vel);
            self.force(t, &q, &p, &mut force);
            for k in 0..s {
                let dh_dp = central(|x| {
                    let mut pp = p.clone();
                    pp[k] = x;
                    (h.energy)(t, &q, &pp)
                }, p[k], cfg.fd_step);
                let dh_dq = central(|x| {
                    let mut qq = q.clone();
                    qq[k] = x;
                    (h.energy)(t, &qq, &p)
                }, q[k], cfg.fd_step);
                report.observe(vel[k], dh_dp, t, &q, &p);
                report.observe(-force[k], dh_dq, t, &q, &p);
            }
        }
        report.finish(cfg.tolerance, &self.name)
    }

    /// Checks the supplied partials `∂H/∂q`, `∂H/∂p` against central
    /// differences of `H`.
    pub fn audit_partials(&self, cfg: &AuditConfig) -> Result<AuditReport> {
        let h = self.require_hamiltonian()?;
        let s = self.dim;
        let mut report = AuditReport::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let (mut q, mut p) = (vec![0.0; s], vec![0.0; s]);
        let (mut gq, mut gp) = (vec![0.0; s], vec![0.0; s]);
        for _ in 0..cfg.samples {
            let t = rng.gen_range(cfg.t_range.0..=cfg.t_range.1);
            for k in 0..s {
                q[k] = rng.gen_range(-cfg.half_width..=cfg.half_width);
                p[k] = rng.gen_range(-cfg.half_width..=cfg.half_width);
            }
            (h.dh_dq)(t, &q, &p, &mut gq);
            (h.dh_dp)(t, &q, &p, &mut gp);
            for k in 0..s {
                let fq = central(|x| {
                    let mut qq = q.clone();
                    qq[k] = x;
                    (h.energy)(t, &qq, &p)
                }, q[k], cfg.fd_step);
                let fp = central(|x| {
                    let mut pp = p.clone();
                    pp[k] = x;
                    (h.energy)(t, &q, &pp)
                }, p[k], cfg.fd_step);
                report.observe(gq[k], fq, t, &q, &p);
                report.observe(gp[k], fp, t, &q, &p);
            }
        }
        report.finish(cfg.tolerance, &self.name)
    }
}

fn central(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    let h = step * x.abs().max(1.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Sampling parameters for finite-difference consistency audits.
#[derive(Debug, Clone)]
pub struct AuditConfig {
    pub seed: u64,
    pub samples: usize,
    /// Samples `q` and `p` uniformly in `[-half_width, half_width]^s`.
    pub half_width: f64,
    pub t_range: (f64, f64),
    /// Relative tolerance, scaled by `max(1, |analytic|, |fd|)`.
    pub tolerance: f64,
    pub fd_step: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            seed: 0,
            samples: 1000,
            half_width: 2.0,
            t_range: (0.0, 1.0),
            tolerance: 1e-6,
            fd_step: 1e-5,
        }
    }
}

impl AuditConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }
}

/// Worst relative discrepancy seen by an audit.
#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub worst: f64,
    pub worst_point: Option<(f64, Vec<f64>, Vec<f64>)>,
    pub checks: usize,
}

impl AuditReport {
    fn observe(&mut self, analytic: f64, fd: f64, t: f64, q: &[f64], p: &[f64]) {
        self.checks += 1;
        let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
        if !(err <= self.worst) {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.worst_point = Some((t, q.to_vec(), p.to_vec()));
        }
    }

    fn finish(self, tolerance: f64, name: &str) -> Result<Self> {
        if self.worst <= tolerance {
            return Ok(self);
        }
        let (t, q, p) = self.worst_point.clone().unwrap_or_default();
        Err(Error::config(format!(
            "model `{name}`: derivative audit failed, relative error {:.3e} > {tolerance:.1e} at t = {t}, q = {q:?}, p = {p:?}",
            self.worst
        )))
    }
}

// ---------------------------------------------------------------------------
// Potential particles

fn check_mass(m: f64) -> Result<()> {
    if m > 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("mass must be positive, got {m}")))
    }
}

/// Audits `grad_u` against central differences of `u`.
pub fn audit_potential(dim: usize, u: &ScalarField, grad_u: &VectorField, cfg: &AuditConfig) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11d);
    let mut q = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    for _ in 0..cfg.samples {
        let t = rng.gen_range(cfg.t_range.0..=cfg.t_range.1);
        for x in q.iter_mut() {
            *x = rng.gen_range(-cfg.half_width..=cfg.half_width);
        }
        grad_u(t, &q, &mut g);
        for k in 0..dim {
            let fd = central(|x| {
                let mut qq = q.clone();
                qq[k] = x;
                u(t, &qq)
            }, q[k], cfg.fd_step);
            report.observe(g[k], fd, t, &q, &[]);
        }
    }
    report.finish(cfg.tolerance, "potential")
}

/// `H = |p|²/2m + U(t, q)`.
pub fn potential_particle(dim: usize, m: f64, u: ScalarField, grad_u: VectorField) -> Result<SystemModel> {
    potential_particle_audited(dim, m, u, grad_u, &AuditConfig::default())
}

pub fn potential_particle_audited(
    dim: usize,
    m: f64,
    u: ScalarField,
    grad_u: VectorField,
    cfg: &AuditConfig,
) -> Result<SystemModel> {
    check_mass(m)?;
    audit_potential(dim, &u, &grad_u, cfg)?;
    Ok(build_potential_particle(dim, m, u, grad_u))
}

fn build_potential_particle(dim: usize, m: f64, u: ScalarField, grad_u: VectorField) -> SystemModel {
    let g = grad_u.clone();
    let force: PhaseMap = Arc::new(move |t, q, _p, out| {
        g(t, q, out);
        for f in out.iter_mut() {
            *f = -*f;
        }
    });
    let velocity: PhaseMap = Arc::new(move |_t, _q, p, out| {
        for (o, pk) in out.iter_mut().zip(p) {
            *o = pk / m;
        }
    });
    let uu = u.clone();
    let energy: PhaseScalar = Arc::new(move |t, q, p| {
        p.iter().map(|x| x * x).sum::<f64>() / (2.0 * m) + uu(t, q)
    });
    let dh_dp = velocity.clone();
    let dh_dq: PhaseMap = Arc::new(move |t, q, _p, out| grad_u(t, q, out));
    SystemModel::new("potential", dim, force, velocity)
        .with_hamiltonian(Hamiltonian {
            energy,
            dh_dq,
            dh_dp,
        })
        .separable(true)
}

/// Potential particle with drag `-β p/m` (equal to `-β v`).
pub fn damped_particle(dim: usize, m: f64, u: ScalarField, grad_u: VectorField, beta: f64) -> Result<SystemModel> {
    check_mass(m)?;
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::config(format!("drag factor must be non-negative, got {beta}")));
    }
    audit_potential(dim, &u, &grad_u, &AuditConfig::default())?;
    if beta == 0.0 {
        return Ok(build_potential_particle(dim, m, u, grad_u));
    }
    let base = build_potential_particle(dim, m, u, grad_u);
    let inner = base.force.clone();
    let force: PhaseMap = Arc::new(move |t, q, p, out| {
        inner(t, q, p, out);
        for (f, pk) in out.iter_mut().zip(p) {
            *f -= beta * pk / m;
        }
    });
    Ok(SystemModel::new("damped", dim, force, base.velocity.clone()).time_dependent(base.time_dependent))
}

// ---------------------------------------------------------------------------
// Library shortcuts

pub fn free_particle(dim: usize, m: f64) -> Result<SystemModel> {
    Ok(potential_particle(dim, m, Arc::new(|_, _| 0.0), Arc::new(|_, _, g| g.fill(0.0)))?
        .named("free")
        .time_dependent(false))
}

/// Isotropic oscillator `U = m ω² |q|² / 2`.
pub fn harmonic_oscillator(dim: usize, m: f64, omega: f64) -> Result<SystemModel> {
    let k = m * omega * omega;
    let u: ScalarField = Arc::new(move |_, q| 0.5 * k * q.iter().map(|x| x * x).sum::<f64>());
    let g: VectorField = Arc::new(move |_, q, out| {
        for (o, x) in out.iter_mut().zip(q) {
            *o = k * x;
        }
    });
    Ok(potential_particle(dim, m, u, g)?.named("harmonic").time_dependent(false))
}

/// One-dimensional constant force `F0`, `U = -F0 q`.
pub fn uniform_force(m: f64, f0: f64) -> Result<SystemModel> {
    let u: ScalarField = Arc::new(move |_, q| -f0 * q[0]);
    let g: VectorField = Arc::new(move |_, _, out| out[0] = -f0);
    Ok(potential_particle(1, m, u, g)?.named("uniform-force").time_dependent(false))
}

pub fn damped_free_particle(dim: usize, m: f64, beta: f64) -> Result<SystemModel> {
    Ok(damped_particle(dim, m, Arc::new(|_, _| 0.0), Arc::new(|_, _, g| g.fill(0.0)), beta)?
        .time_dependent(false))
}

// ---------------------------------------------------------------------------
// Generic Hamiltonian and N-body systems

/// Generic Hamiltonian model; the partials are audited against `H`.
pub fn hamiltonian_model(
    dim: usize,
    energy: PhaseScalar,
    dh_dq: PhaseMap,
    dh_dp: PhaseMap,
    cfg: &AuditConfig,
) -> Result<SystemModel> {
    let q_partials = dh_dq.clone();
    let force: PhaseMap = Arc::new(move |t, q, p, out| {
        q_partials(t, q, p, out);
        for f in out.iter_mut() {
            *f = -*f;
        }
    });
    let model = SystemModel::new("hamiltonian", dim, force, dh_dp.clone()).with_hamiltonian(Hamiltonian {
        energy,
        dh_dq,
        dh_dp,
    });
    model.audit_partials(cfg)?;
    Ok(model)
}

/// Hamiltonian given as an expression in `t`, `q*`, `p*`; partials are
/// derived symbolically.
pub fn hamiltonian_from_expr(dim: usize, text: &str, cfg: &AuditConfig) -> Result<SystemModel> {
    let h = expr::parse(text, Symbols::phase(dim))?;
    let time_dependent = h.depends_on(Var::T);
    let separable = (0..dim).all(|k| {
        let dq = h.derivative(Var::Q(k));
        let dp = h.derivative(Var::P(k));
        (0..dim).all(|j| !dq.depends_on(Var::P(j)) && !dp.depends_on(Var::Q(j)))
    });
    let dq: Vec<Expr> = (0..dim).map(|k| h.derivative(Var::Q(k))).collect();
    let dp: Vec<Expr> = (0..dim).map(|k| h.derivative(Var::P(k))).collect();
    let energy: PhaseScalar = {
        let h = h.clone();
        Arc::new(move |t, q, p| h.eval(&Bindings::new(t, q, p)).unwrap_or(f64::NAN))
    };
    let model = hamiltonian_model(dim, energy, expr_map(dq), expr_map(dp), cfg)?;
    Ok(model.separable(separable).time_dependent(time_dependent))
}

pub(crate) fn expr_map(components: Vec<Expr>) -> PhaseMap {
    Arc::new(move |t, q, p, out| {
        let b = Bindings::new(t, q, p);
        for (o, e) in out.iter_mut().zip(&components) {
            *o = e.eval(&b).unwrap_or(f64::NAN);
        }
    })
}

/// `N` particles in `particle_dim` dimensions with a shared potential over
/// the flattened configuration `(r_1, ..., r_N)`.
pub fn nbody(masses: &[f64], particle_dim: usize, u: ScalarField, grad_u: VectorField) -> Result<SystemModel> {
    if masses.is_empty() {
        return Err(Error::config("n-body model needs at least one mass"));
    }
    for &m in masses {
        check_mass(m)?;
    }
    if particle_dim == 0 {
        return Err(Error::config("particle dimension must be positive"));
    }
    let dim = masses.len() * particle_dim;
    audit_potential(dim, &u, &grad_u, &AuditConfig::default())?;
    let per_coord: Arc<[f64]> = masses
        .iter()
        .flat_map(|&m| std::iter::repeat(m).take(particle_dim))
        .collect();
    let g = grad_u.clone();
    let force: PhaseMap = Arc::new(move |t, q, _p, out| {
        g(t, q, out);
        for f in out.iter_mut() {
            *f = -*f;
        }
    });
    let mv = per_coord.clone();
    let velocity: PhaseMap = Arc::new(move |_t, _q, p, out| {
        for k in 0..out.len() {
            out[k] = p[k] / mv[k];
        }
    });
    let me = per_coord.clone();
    let uu = u.clone();
    let energy: PhaseScalar = Arc::new(move |t, q, p| {
        p.iter().zip(me.iter()).map(|(pk, m)| pk * pk / (2.0 * m)).sum::<f64>() + uu(t, q)
    });
    let dh_dq: PhaseMap = Arc::new(move |t, q, _p, out| grad_u(t, q, out));
    Ok(SystemModel::new("nbody", dim, force, velocity.clone())
        .with_hamiltonian(Hamiltonian {
            energy,
            dh_dq,
            dh_dp: velocity,
        })
        .separable(true))
}

/// Two particles on a line joined by a spring, `U = k (x1 - x2)² / 2`.
pub fn spring_pair(k: f64, m1: f64, m2: f64) -> Result<SystemModel> {
    let u: ScalarField = Arc::new(move |_, q| 0.5 * k * (q[0] - q[1]).powi(2));
    let g: VectorField = Arc::new(move |_, q, out| {
        let d = k * (q[0] - q[1]);
        out[0] = d;
        out[1] = -d;
    });
    Ok(nbody(&[m1, m2], 1, u, g)?.named("spring-pair").time_dependent(false))
}

// ---------------------------------------------------------------------------
// Electromagnetic models

/// Scalar and vector potentials with the derivatives the models need.
#[derive(Clone)]
pub struct EmPotentials {
    pub phi: ScalarField,
    pub grad_phi: VectorField,
    /// `A(t, r)`
    pub vector: VectorField,
    /// `∂A/∂t`
    pub vector_dt: VectorField,
    /// Row-major `J[i*3 + j] = ∂A_i/∂x_j`.
    pub vector_jacobian: VectorField,
    pub time_dependent: bool,
}

impl EmPotentials {
    pub fn zero() -> Self {
        let zero3: VectorField = Arc::new(|_, _, out| out.fill(0.0));
        EmPotentials {
            phi: Arc::new(|_, _| 0.0),
            grad_phi: zero3.clone(),
            vector: zero3.clone(),
            vector_dt: zero3.clone(),
            vector_jacobian: zero3,
            time_dependent: false,
        }
    }

    /// Uniform fields: `φ = -E·r`, `A = (H × r)/2` (symmetric gauge).
    pub fn uniform(e_field: [f64; 3], h_field: [f64; 3]) -> Self {
        let [hx, hy, hz] = h_field;
        // J = ½ [H]_× : A_i = ½ ε_ijk H_j r_k
        let jac = [0.0, -0.5 * hz, 0.5 * hy, 0.5 * hz, 0.0, -0.5 * hx, -0.5 * hy, 0.5 * hx, 0.0];
        EmPotentials {
            phi: Arc::new(move |_, r| -(e_field[0] * r[0] + e_field[1] * r[1] + e_field[2] * r[2])),
            grad_phi: Arc::new(move |_, _, out| {
                for k in 0..3 {
                    out[k] = -e_field[k];
                }
            }),
            vector: Arc::new(move |_, r, out| {
                out[0] = 0.5 * (hy * r[2] - hz * r[1]);
                out[1] = 0.5 * (hz * r[0] - hx * r[2]);
                out[2] = 0.5 * (hx * r[1] - hy * r[0]);
            }),
            vector_dt: Arc::new(|_, _, out| out.fill(0.0)),
            vector_jacobian: Arc::new(move |_, _, out| out.copy_from_slice(&jac)),
            time_dependent: false,
        }
    }

    /// Constant vector potential (no fields, pure gauge).
    pub fn constant_vector(a: [f64; 3]) -> Self {
        EmPotentials {
            vector: Arc::new(move |_, _, out| out.copy_from_slice(&a)),
            ..Self::zero()
        }
    }

    /// Potentials from expressions in `t, x, y, z`; derivatives are symbolic.
    pub fn from_exprs(phi: &str, a: [&str; 3]) -> Result<Self> {
        let sym = Symbols {
            dims: 3,
            momenta: false,
            betas: false,
        };
        let phi = expr::parse(phi, sym)?;
        let a: Vec<Expr> = a.iter().map(|s| expr::parse(s, sym)).collect::<Result<_>>()?;
        let time_dependent = phi.depends_on(Var::T) || a.iter().any(|e| e.depends_on(Var::T));
        let grad_phi: Vec<Expr> = (0..3).map(|k| phi.derivative(Var::Q(k))).collect();
        let a_dt: Vec<Expr> = a.iter().map(|e| e.derivative(Var::T)).collect();
        let jac: Vec<Expr> = a
            .iter()
            .flat_map(|e| (0..3).map(move |j| e.derivative(Var::Q(j))))
            .collect();
        let field = |exprs: Vec<Expr>| -> VectorField {
            Arc::new(move |t, r, out| {
                let b = Bindings::new(t, r, &[]);
                for (o, e) in out.iter_mut().zip(&exprs) {
                    *o = e.eval(&b).unwrap_or(f64::NAN);
                }
            })
        };
        Ok(EmPotentials {
            phi: Arc::new(move |t, r| phi.eval(&Bindings::new(t, r, &[])).unwrap_or(f64::NAN)),
            grad_phi: field(grad_phi),
            vector: field(a),
            vector_dt: field(a_dt),
            vector_jacobian: field(jac),
            time_dependent,
        })
    }

    pub fn vector_potential(&self, t: f64, r: &[f64]) -> [f64; 3] {
        let mut a = [0.0; 3];
        (self.vector)(t, r, &mut a);
        a
    }

    /// `E = -∇φ - (1/c) ∂A/∂t`
    pub fn electric(&self, t: f64, r: &[f64], c: f64) -> [f64; 3] {
        let (mut g, mut at) = ([0.0; 3], [0.0; 3]);
        (self.grad_phi)(t, r, &mut g);
        (self.vector_dt)(t, r, &mut at);
        [-g[0] - at[0] / c, -g[1] - at[1] / c, -g[2] - at[2] / c]
    }

    /// `H = rot A`
    pub fn magnetic(&self, t: f64, r: &[f64]) -> [f64; 3] {
        let mut j = [0.0; 9];
        (self.vector_jacobian)(t, r, &mut j);
        [j[7] - j[5], j[2] - j[6], j[3] - j[1]]
    }
}

/// `e (E + v × H / c)`
pub fn lorentz_force(e: f64, c: f64, electric: [f64; 3], magnetic: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    let cross = cross(v, magnetic);
    [
        e * (electric[0] + cross[0] / c),
        e * (electric[1] + cross[1] / c),
        e * (electric[2] + cross[2] / c),
    ]
}

#[inline]
pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Mass, charge and light speed of a charged particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Charge {
    pub m: f64,
    pub e: f64,
    pub c: f64,
}

impl Default for Charge {
    fn default() -> Self {
        Charge { m: 1.0, e: 1.0, c: 1.0 }
    }
}

impl Charge {
    fn validate(&self) -> Result<()> {
        check_mass(self.m)?;
        if !(self.c > 0.0) {
            return Err(Error::config(format!("light speed must be positive, got {}", self.c)));
        }
        Ok(())
    }

    /// `v = (P - (e/c) A) / m`
    pub fn velocity(&self, p: &[f64], a: [f64; 3]) -> [f64; 3] {
        let k = self.e / self.c;
        [
            (p[0] - k * a[0]) / self.m,
            (p[1] - k * a[1]) / self.m,
            (p[2] - k * a[2]) / self.m,
        ]
    }
}

/// Charged particle in external potentials. The state momentum is the
/// canonical `P = m v + (e/c) A`, whose rate of change along an orbit is
/// `-e ∇φ + (e/c) Σ_j v_j ∇A_j`.
pub fn em_particle(charge: Charge, fields: EmPotentials) -> Result<SystemModel> {
    charge.validate()?;
    let Charge { m, e, c } = charge;
    let f = fields.clone();
    let velocity: PhaseMap = Arc::new(move |t, q, p, out| {
        let a = f.vector_potential(t, q);
        out[..3].copy_from_slice(&charge.velocity(p, a));
    });
    let f = fields.clone();
    let force: PhaseMap = Arc::new(move |t, q, p, out| {
        let a = f.vector_potential(t, q);
        let v = charge.velocity(p, a);
        let (mut g, mut j) = ([0.0; 3], [0.0; 9]);
        (f.grad_phi)(t, q, &mut g);
        (f.vector_jacobian)(t, q, &mut j);
        for i in 0..3 {
            let mut acc = 0.0;
            for (k, vk) in v.iter().enumerate() {
                acc += vk * j[k * 3 + i];
            }
            out[i] = -e * g[i] + e / c * acc;
        }
    });
    let f = fields.clone();
    let energy: PhaseScalar = Arc::new(move |t, q, p| {
        let a = f.vector_potential(t, q);
        let v = charge.velocity(p, a);
        0.5 * m * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) + e * (f.phi)(t, q)
    });
    let fq = force.clone();
    let dh_dq: PhaseMap = Arc::new(move |t, q, p, out| {
        fq(t, q, p, out);
        for x in out.iter_mut() {
            *x = -*x;
        }
    });
    Ok(SystemModel::new("em", 3, force, velocity.clone())
        .with_hamiltonian(Hamiltonian {
            energy,
            dh_dq,
            dh_dp: velocity,
        })
        .time_dependent(fields.time_dependent))
}

/// Drag law for a charged particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DragVariant {
    /// `-β v`
    VelocityDrag,
    /// `-(β/m)(m v + (e/c) A) = -(β/m) P`
    CanonicalDrag,
}

impl std::str::FromStr for DragVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "velocity_drag" => Ok(DragVariant::VelocityDrag),
            "canonical_drag" => Ok(DragVariant::CanonicalDrag),
            other => Err(Error::config(format!(
                "unknown drag variant `{other}` (expected velocity_drag or canonical_drag)"
            ))),
        }
    }
}

pub fn damped_em_particle(
    charge: Charge,
    fields: EmPotentials,
    beta: f64,
    variant: DragVariant,
) -> Result<SystemModel> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::config(format!("drag factor must be non-negative, got {beta}")));
    }
    let base = em_particle(charge, fields.clone())?;
    let inner = base.force.clone();
    let m = charge.m;
    let force: PhaseMap = Arc::new(move |t, q, p, out| {
        inner(t, q, p, out);
        match variant {
            DragVariant::VelocityDrag => {
                let v = charge.velocity(p, fields.vector_potential(t, q));
                for i in 0..3 {
                    out[i] -= beta * v[i];
                }
            }
            DragVariant::CanonicalDrag => {
                for i in 0..3 {
                    out[i] -= beta / m * p[i];
                }
            }
        }
    });
    let name = match variant {
        DragVariant::VelocityDrag => "damped-em-velocity",
        DragVariant::CanonicalDrag => "damped-em-canonical",
    };
    Ok(SystemModel::new(name, 3, force, base.velocity.clone()).time_dependent(base.time_dependent))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(model: &SystemModel, q: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (mut f, mut v) = (vec![0.0; model.dim()], vec![0.0; model.dim()]);
        model.force(0.0, q, p, &mut f);
        model.velocity(0.0, q, p, &mut v);
        (f, v)
    }

    #[test]
    fn potential_particle_examples() {
        let ho = harmonic_oscillator(1, 1.0, 1.0).unwrap();
        assert_eq!(eval(&ho, &[1.0], &[0.0]), (vec![-1.0], vec![0.0]));
        assert_eq!(ho.energy(0.0, &[1.0], &[1.0]), Some(1.0));
        let free = free_particle(1, 2.0).unwrap();
        assert_eq!(eval(&free, &[0.0], &[4.0]), (vec![0.0], vec![2.0]));
        assert!(ho.is_hamiltonian() && ho.is_separable());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(free_particle(1, 0.0).is_err());
        assert!(damped_free_particle(1, 1.0, -0.1).is_err());
        assert!(nbody(&[], 1, Arc::new(|_, _| 0.0), Arc::new(|_, _, g| g.fill(0.0))).is_err());
        assert!(nbody(&[1.0, -1.0], 1, Arc::new(|_, _| 0.0), Arc::new(|_, _, g| g.fill(0.0))).is_err());
        assert!("quadratic_drag".parse::<DragVariant>().is_err());
    }

    #[test]
    fn inconsistent_gradient_is_rejected() {
        let u: ScalarField = Arc::new(|_, q| q[0] * q[0]);
        let g: VectorField = Arc::new(|_, q, out| out[0] = q[0]); // should be 2q
        let err = potential_particle(1, 1.0, u, g).unwrap_err();
        assert!(err.to_string().contains("audit"), "{err}");
    }

    #[test]
    fn damped_particle_examples() {
        let d = damped_free_particle(1, 1.0, 1.0).unwrap();
        assert_eq!(eval(&d, &[0.0], &[1.0]).0, vec![-1.0]);
        assert!(!d.is_hamiltonian());

        let u: ScalarField = Arc::new(|_, q| 0.5 * q[0] * q[0]);
        let g: VectorField = Arc::new(|_, q, out| out[0] = q[0]);
        let d = damped_particle(1, 1.0, u.clone(), g.clone(), 0.5).unwrap();
        assert_eq!(eval(&d, &[1.0], &[2.0]).0, vec![-2.0]);

        let d0 = damped_particle(1, 1.0, u.clone(), g.clone(), 0.0).unwrap();
        let pp = potential_particle(1, 1.0, u, g).unwrap();
        for i in 0..50 {
            let q = [i as f64 * 0.37 - 9.0];
            let p = [3.0 - i as f64 * 0.11];
            let (a, b) = (eval(&d0, &q, &p), eval(&pp, &q, &p));
            assert_eq!(a.0[0].to_bits(), b.0[0].to_bits());
            assert_eq!(a.1[0].to_bits(), b.1[0].to_bits());
        }
    }

    #[test]
    fn em_examples() {
        let free = em_particle(Charge::default(), EmPotentials::zero()).unwrap();
        let (f, v) = eval(&free, &[0.3, 0.1, -2.0], &[1.0, 2.0, 3.0]);
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
        assert_eq!(f, vec![0.0, 0.0, 0.0]);

        let lf = lorentz_force(1.0, 1.0, [0.0; 3], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]);
        assert_eq!(lf, [0.0, -1.0, 0.0]);

        let fields = EmPotentials::uniform([0.0; 3], [0.0, 0.0, 1.0]);
        assert_eq!(fields.magnetic(0.0, &[0.4, -0.2, 0.9]), [0.0, 0.0, 1.0]);
        let pot = EmPotentials::constant_vector([1.0, 0.0, 0.0]);
        let model = em_particle(Charge::default(), pot).unwrap();
        assert_eq!(eval(&model, &[0.0; 3], &[1.0, 0.0, 0.0]).1, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn em_force_is_rate_of_canonical_momentum() {
        // For a uniform magnetic field the canonical force must match
        // m dv/dt + (e/c)(v·∇)A with m dv/dt the Lorentz force.
        let h = [0.3, -0.7, 1.1];
        let e_field = [0.2, 0.0, -0.4];
        let fields = EmPotentials::uniform(e_field, h);
        let charge = Charge { m: 1.3, e: 0.8, c: 2.0 };
        let model = em_particle(charge, fields.clone()).unwrap();
        let r = [0.5, -1.0, 0.25];
        let p = [0.1, 0.9, -0.3];
        let mut f = [0.0; 3];
        model.force(0.0, &r, &p, &mut f);
        let v = charge.velocity(&p, fields.vector_potential(0.0, &r));
        let lorentz = lorentz_force(charge.e, charge.c, fields.electric(0.0, &r, charge.c), h, v);
        let mut j = [0.0; 9];
        (fields.vector_jacobian)(0.0, &r, &mut j);
        for i in 0..3 {
            let convective: f64 = (0..3).map(|k| v[k] * j[i * 3 + k]).sum();
            let expected = lorentz[i] + charge.e / charge.c * convective;
            assert!((f[i] - expected).abs() < 1e-14, "{i}: {} vs {expected}", f[i]);
        }
    }

    #[test]
    fn em_expression_potentials_match_closed_form() {
        let a = EmPotentials::from_exprs("-0.5*x", ["-0.5*y", "0.5*x", "0"]).unwrap();
        assert_eq!(a.magnetic(0.0, &[1.0, 2.0, 3.0]), [0.0, 0.0, 1.0]);
        assert_eq!(a.electric(0.0, &[1.0, 2.0, 3.0], 1.0), [0.5, 0.0, 0.0]);
    }

    #[test]
    fn damped_em_variants() {
        let zero = EmPotentials::zero();
        let vd = damped_em_particle(Charge::default(), zero.clone(), 0.7, DragVariant::VelocityDrag).unwrap();
        let cd = damped_em_particle(Charge::default(), zero, 0.7, DragVariant::CanonicalDrag).unwrap();
        for i in 0..20 {
            let q = [0.1 * i as f64, -0.2, 0.3];
            let p = [1.0 - 0.05 * i as f64, 0.4, -0.6];
            assert_eq!(eval(&vd, &q, &p), eval(&cd, &q, &p));
        }
        let pot = EmPotentials::constant_vector([1.0, 0.0, 0.0]);
        let cd = damped_em_particle(Charge::default(), pot, 1.0, DragVariant::CanonicalDrag).unwrap();
        // v = 0 means P = (e/c) A
        assert_eq!(eval(&cd, &[0.0; 3], &[1.0, 0.0, 0.0]).0, vec![-1.0, 0.0, 0.0]);

        let plain = damped_free_particle(3, 1.0, 0.7).unwrap();
        let vd = damped_em_particle(Charge::default(), EmPotentials::zero(), 0.7, DragVariant::VelocityDrag).unwrap();
        let (q, p) = ([0.2, 0.1, 0.0], [1.5, -2.0, 0.25]);
        assert_eq!(eval(&plain, &q, &p), eval(&vd, &q, &p));
    }

    #[test]
    fn nbody_examples() {
        let pair = spring_pair(1.0, 1.0, 1.0).unwrap();
        assert_eq!(eval(&pair, &[1.0, 0.0], &[0.0, 0.0]).0, vec![-1.0, 1.0]);
        let heavy = spring_pair(1.0, 2.0, 4.0).unwrap();
        assert_eq!(eval(&heavy, &[0.0, 0.0], &[2.0, 2.0]).1, vec![1.0, 0.5]);

        let single = nbody(&[2.0], 1, Arc::new(|_, q| 0.5 * q[0] * q[0]), Arc::new(|_, q, g| g[0] = q[0])).unwrap();
        let pp = potential_particle(1, 2.0, Arc::new(|_, q| 0.5 * q[0] * q[0]), Arc::new(|_, q, g| g[0] = q[0])).unwrap();
        assert_eq!(eval(&single, &[0.3], &[1.1]), eval(&pp, &[0.3], &[1.1]));
    }

    #[test]
    fn generic_hamiltonian_examples() {
        let cfg = AuditConfig::default();
        let free = hamiltonian_from_expr(1, "p1^2/2", &cfg).unwrap();
        assert_eq!(eval(&free, &[0.0], &[3.0]), (vec![0.0], vec![3.0]));
        let tilt = hamiltonian_from_expr(1, "p1^2/2 - 2*q1", &cfg).unwrap();
        for q in [-3.0, 0.0, 5.0] {
            assert_eq!(eval(&tilt, &[q], &[0.7]).0, vec![2.0]);
        }
        assert!(tilt.is_separable());
        let coupled = hamiltonian_from_expr(2, "p1*p2 + q1*p2", &cfg).unwrap();
        assert!(!coupled.is_separable());
    }

    #[test]
    fn bad_partials_report_worst_point() {
        let e: PhaseScalar = Arc::new(|_, q, p| 0.5 * p[0] * p[0] + q[0].powi(4));
        let dq: PhaseMap = Arc::new(|_, q, _, out| out[0] = 4.0 * q[0].powi(3) + 1e-3);
        let dp: PhaseMap = Arc::new(|_, _, p, out| out[0] = p[0]);
        let err = hamiltonian_model(1, e, dq, dp, &AuditConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("q = ["), "{msg}");
    }

    #[test]
    fn bundled_models_pass_consistency_audit() {
        let cfg = AuditConfig::default();
        let models = vec![
            free_particle(2, 1.5).unwrap(),
            harmonic_oscillator(2, 1.0, 2.0).unwrap(),
            uniform_force(1.0, 2.0).unwrap(),
            spring_pair(1.0, 1.0, 3.0).unwrap(),
            em_particle(Charge::default(), EmPotentials::uniform([0.1, 0.0, 0.0], [0.0, 0.0, 1.0])).unwrap(),
            hamiltonian_from_expr(1, "p1^2/2 + q1^2/2", &cfg).unwrap(),
        ];
        for m in models {
            let r = m.audit_hamiltonian(&cfg).unwrap();
            assert!(r.worst < 1e-6, "{}: {}", m.name(), r.worst);
            assert_eq!(r.checks, 2 * 1000 * m.dim());
        }
    }

    #[test]
    fn evaluation_is_pure() {
        let m = em_particle(Charge::default(), EmPotentials::uniform([0.3, 0.2, 0.1], [0.0, 1.0, 1.0])).unwrap();
        let q = [0.123, -4.5, 0.75];
        let p = [1.0 / 3.0, 2.0, -0.1];
        let first = eval(&m, &q, &p);
        for _ in 0..10 {
            let again = eval(&m, &q, &p);
            assert!(first.0.iter().zip(&again.0).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(first.1.iter().zip(&again.1).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
