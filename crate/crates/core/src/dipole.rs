//! Nonrelativistic particle with a magnetic dipole: orbit and spin
//! precession as ODEs, and the spin-angle fields `ξ(t, r)`, `χ(t, r)`
//! carried by the ensemble flow.
//!
//! The spin is `s = (s⊥ sin χ, s⊥ cos χ, ξ)` with `s⊥ = sqrt(|s|² − ξ²)`.
//! `χ` is stored unwrapped (on the real line) so that `∇χ` is meaningful on
//! a grid; wrapped input data produces spurious jumps of `2π` at the seams.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::advect::{self, DensityReport, StepReport};
use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::model::cross;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipoleParams {
    pub m: f64,
    pub e: f64,
    pub c: f64,
    pub gamma: f64,
    pub spin_mag: f64,
}

impl Default for DipoleParams {
    fn default() -> Self {
        DipoleParams {
            m: 1.0,
            e: 1.0,
            c: 1.0,
            gamma: 1.0,
            spin_mag: 0.5,
        }
    }
}

impl DipoleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0) || !(self.c > 0.0) || !(self.spin_mag > 0.0) {
            return Err(Error::config(format!(
                "dipole parameters need m, c and spin_mag positive (got m = {}, c = {}, spin_mag = {})",
                self.m, self.c, self.spin_mag
            )));
        }
        if !self.e.is_finite() || !self.gamma.is_finite() {
            return Err(Error::config("dipole charge and gyromagnetic ratio must be finite"));
        }
        Ok(())
    }
}

/// Nodes or states closer than this to `|ξ| = spin_mag` freeze `χ`.
pub const POLE_TOLERANCE: f64 = 1e-9;

/// `s = (s⊥ sin χ, s⊥ cos χ, ξ)`.
pub fn spin_vector_from_angles(xi: f64, chi: f64, spin_mag: f64) -> Result<[f64; 3]> {
    if !(xi.abs() <= spin_mag) {
        return Err(Error::Domain {
            func: "spin projection",
            value: xi,
        });
    }
    let perp = (spin_mag * spin_mag - xi * xi).max(0.0).sqrt();
    Ok([perp * chi.sin(), perp * chi.cos(), xi])
}

/// Inverse of [`spin_vector_from_angles`], choosing the branch of `χ`
/// nearest `chi_ref`.
pub fn angles_from_spin(s: [f64; 3], chi_ref: f64) -> (f64, f64) {
    let raw = s[0].atan2(s[1]);
    let turns = ((chi_ref - raw) / (2.0 * PI)).round();
    (s[2], raw + 2.0 * PI * turns)
}

fn near_pole(xi: f64, spin_mag: f64) -> bool {
    spin_mag - xi.abs() <= POLE_TOLERANCE * spin_mag
}

/// `H_sp = −γ s·H` and its partials `(∂/∂ξ, ∂/∂χ)`. At a pole the `ξ`
/// partial keeps only its regular part.
pub fn spin_hamiltonian(params: &DipoleParams, xi: f64, chi: f64, h: [f64; 3]) -> (f64, f64, f64) {
    let g = params.gamma;
    let perp = (params.spin_mag * params.spin_mag - xi * xi).max(0.0).sqrt();
    let (sn, cs) = chi.sin_cos();
    let energy = -g * (perp * sn * h[0] + perp * cs * h[1] + xi * h[2]);
    let d_chi = -g * perp * (cs * h[0] - sn * h[1]);
    let d_xi = if perp > 0.0 {
        -g * (h[2] - xi / perp * (sn * h[0] + cs * h[1]))
    } else {
        -g * h[2]
    };
    (energy, d_xi, d_chi)
}

pub type Field3 = Arc<dyn Fn(f64, &[f64; 3]) -> [f64; 3] + Send + Sync>;
/// `J[i][j] = ∂H_i/∂x_j`
pub type Jacobian3 = Arc<dyn Fn(f64, &[f64; 3]) -> [[f64; 3]; 3] + Send + Sync>;

/// External electric and magnetic fields with the magnetic Jacobian.
#[derive(Clone)]
pub struct DipoleFields {
    pub electric: Field3,
    pub magnetic: Field3,
    pub magnetic_jacobian: Jacobian3,
}

impl DipoleFields {
    pub fn uniform(e_field: [f64; 3], h_field: [f64; 3]) -> Self {
        DipoleFields {
            electric: Arc::new(move |_, _| e_field),
            magnetic: Arc::new(move |_, _| h_field),
            magnetic_jacobian: Arc::new(|_, _| [[0.0; 3]; 3]),
        }
    }

    /// `H = (0, 0, h0 + k z)`, `E = 0`.
    pub fn z_gradient(h0: f64, k: f64) -> Self {
        DipoleFields {
            electric: Arc::new(|_, _| [0.0; 3]),
            magnetic: Arc::new(move |_, r| [0.0, 0.0, h0 + k * r[2]]),
            magnetic_jacobian: Arc::new(move |_, _| [[0.0; 3], [0.0; 3], [0.0, 0.0, k]]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DipoleState {
    pub t: f64,
    pub r: [f64; 3],
    pub v: [f64; 3],
    pub xi: f64,
    pub chi: f64,
    /// `χ` was frozen because the spin sat at a pole.
    pub pole: bool,
}

impl DipoleState {
    pub fn new(t: f64, r: [f64; 3], v: [f64; 3], xi: f64, chi: f64) -> Self {
        DipoleState {
            t,
            r,
            v,
            xi,
            chi,
            pole: false,
        }
    }

    pub fn spin(&self, spin_mag: f64) -> Result<[f64; 3]> {
        spin_vector_from_angles(self.xi, self.chi, spin_mag)
    }
}

fn rk4<const N: usize>(f: &impl Fn(f64, &[f64; N]) -> [f64; N], t: f64, y: &[f64; N], dt: f64) -> [f64; N] {
    let add = |a: &[f64; N], k: &[f64; N], h: f64| std::array::from_fn::<f64, N, _>(|i| a[i] + h * k[i]);
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * dt, &add(y, &k1, 0.5 * dt));
    let k3 = f(t + 0.5 * dt, &add(y, &k2, 0.5 * dt));
    let k4 = f(t + dt, &add(y, &k3, dt));
    std::array::from_fn(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

fn translational_force(params: &DipoleParams, fields: &DipoleFields, t: f64, r: &[f64; 3], v: [f64; 3], s: [f64; 3]) -> [f64; 3] {
    let e_f = (fields.electric)(t, r);
    let h = (fields.magnetic)(t, r);
    let j = (fields.magnetic_jacobian)(t, r);
    let vxh = cross(v, h);
    std::array::from_fn(|i| {
        let grad = s[0] * j[i][0] + s[1] * j[i][1] + s[2] * j[i][2];
        (params.e * (e_f[i] + vxh[i] / params.c) + params.gamma * grad) / params.m
    })
}

fn check_run(params: &DipoleParams, state0: &DipoleState, dt: f64, t_end: f64) -> Result<()> {
    params.validate()?;
    if !(dt > 0.0) || !(t_end > state0.t) {
        return Err(Error::config("need dt > 0 and t_end beyond the initial time"));
    }
    if !(state0.xi.abs() <= params.spin_mag) {
        return Err(Error::Domain {
            func: "spin projection",
            value: state0.xi,
        });
    }
    Ok(())
}

fn steps(t0: f64, dt: f64, t_end: f64) -> impl Iterator<Item = (f64, f64)> {
    let n = ((t_end - t0) / dt - 1e-9).ceil().max(1.0) as usize;
    (0..n).map(move |k| {
        let a = t0 + k as f64 * dt;
        let b = if k + 1 == n { t_end } else { t0 + (k + 1) as f64 * dt };
        (a, b)
    })
}

/// RK4 over the joint `(r, v, s)` system with `(ξ, χ)` recovered from `s`
/// after every step.
pub fn integrate_dipole_lagrangian(
    params: &DipoleParams,
    fields: &DipoleFields,
    state0: &DipoleState,
    dt: f64,
    t_end: f64,
) -> Result<Vec<DipoleState>> {
    check_run(params, state0, dt, t_end)?;
    let s0 = state0.spin(params.spin_mag)?;
    let mut y = [
        state0.r[0], state0.r[1], state0.r[2], state0.v[0], state0.v[1], state0.v[2], s0[0], s0[1], s0[2],
    ];
    let rhs = |t: f64, y: &[f64; 9]| -> [f64; 9] {
        let r = [y[0], y[1], y[2]];
        let v = [y[3], y[4], y[5]];
        let s = [y[6], y[7], y[8]];
        let a = translational_force(params, fields, t, &r, v, s);
        let ds = cross(s, (fields.magnetic)(t, &r));
        [
            v[0], v[1], v[2], a[0], a[1], a[2],
            params.gamma * ds[0], params.gamma * ds[1], params.gamma * ds[2],
        ]
    };
    let mut first = state0.clone();
    first.pole = near_pole(first.xi, params.spin_mag);
    let mut out = vec![first];
    let mut chi = state0.chi;
    for (t, t_next) in steps(state0.t, dt, t_end) {
        let prev = y;
        y = rk4(&rhs, t, &y, t_next - t);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup {
                t,
                q: prev[..3].to_vec(),
                p: prev[3..6].to_vec(),
            });
        }
        let s = [y[6], y[7], y[8]];
        let pole = near_pole(s[2], params.spin_mag);
        let (xi, c) = angles_from_spin(s, chi);
        if !pole {
            chi = c;
        }
        out.push(DipoleState {
            t: t_next,
            r: [y[0], y[1], y[2]],
            v: [y[3], y[4], y[5]],
            xi,
            chi,
            pole,
        });
    }
    Ok(out)
}

/// Same motion with the spin advanced through the canonical pair
/// `dξ/dt = ∂H_sp/∂χ`, `dχ/dt = −∂H_sp/∂ξ`.
pub fn integrate_dipole_canonical(
    params: &DipoleParams,
    fields: &DipoleFields,
    state0: &DipoleState,
    dt: f64,
    t_end: f64,
) -> Result<Vec<DipoleState>> {
    check_run(params, state0, dt, t_end)?;
    let rhs = |t: f64, y: &[f64; 8]| -> [f64; 8] {
        let r = [y[0], y[1], y[2]];
        let v = [y[3], y[4], y[5]];
        let (xi, chi) = (y[6], y[7]);
        let s = spin_vector_from_angles(xi.clamp(-params.spin_mag, params.spin_mag), chi, params.spin_mag)
            .expect("clamped projection is in range");
        let a = translational_force(params, fields, t, &r, v, s);
        let h = (fields.magnetic)(t, &r);
        let (_, d_xi, d_chi) = spin_hamiltonian(params, xi, chi, h);
        let chi_rate = if near_pole(xi, params.spin_mag) { 0.0 } else { -d_xi };
        [v[0], v[1], v[2], a[0], a[1], a[2], d_chi, chi_rate]
    };
    let mut y = [
        state0.r[0], state0.r[1], state0.r[2], state0.v[0], state0.v[1], state0.v[2], state0.xi, state0.chi,
    ];
    let mut first = state0.clone();
    first.pole = near_pole(first.xi, params.spin_mag);
    let mut out = vec![first];
    for (t, t_next) in steps(state0.t, dt, t_end) {
        let prev = y;
        y = rk4(&rhs, t, &y, t_next - t);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup {
                t,
                q: prev[..3].to_vec(),
                p: prev[3..6].to_vec(),
            });
        }
        out.push(DipoleState {
            t: t_next,
            r: [y[0], y[1], y[2]],
            v: [y[3], y[4], y[5]],
            xi: y[6],
            chi: y[7],
            pole: near_pole(y[6], params.spin_mag),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Eulerian spin fields

/// Action, spin angles and density on one position grid (1 to 3 axes;
/// missing axes are held at zero).
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleFieldSet {
    pub s: GridField,
    pub xi: GridField,
    pub chi: GridField,
    pub rho: GridField,
}

impl DipoleFieldSet {
    pub fn new(s: GridField, xi: GridField, chi: GridField, rho: GridField, spin_mag: f64) -> Result<Self> {
        let spec = &s.spec;
        if spec.dims() > 3 {
            return Err(Error::config("dipole grids have at most three axes"));
        }
        for f in [&s, &xi, &chi, &rho] {
            if f.spec != *spec || f.components != 1 {
                return Err(Error::contract("dipole fields must be scalars on one grid"));
            }
        }
        if let Some(node) = (0..spec.node_count()).find(|&i| !(xi.get(0, i).abs() <= spin_mag)) {
            return Err(Error::Domain {
                func: "spin projection",
                value: xi.get(0, node),
            });
        }
        Ok(DipoleFieldSet { s, xi, chi, rho })
    }

    pub fn t(&self) -> f64 {
        self.s.t
    }
}

fn embed(x: &[f64]) -> [f64; 3] {
    let mut r = [0.0; 3];
    r[..x.len()].copy_from_slice(x);
    r
}

/// Optional vector potential `A(t, r)`.
pub type VectorPotential<'a> = Option<&'a (dyn Fn(f64, &[f64; 3]) -> [f64; 3] + Sync)>;

/// `m v = ∇S − (e/c) A + ξ ∇χ`, returning the components along the grid
/// axes.
pub fn dipole_velocity_from_fields(fs: &DipoleFieldSet, params: &DipoleParams, a: VectorPotential<'_>) -> Result<GridField> {
    params.validate()?;
    let spec = &fs.s.spec;
    let d = spec.dims();
    let n = spec.node_count();
    let mut v = GridField::zeros(spec, d, fs.t());
    let gs: Vec<Vec<f64>> = (0..d).map(|k| fs.s.derivative(0, k)).collect();
    let gc: Vec<Vec<f64>> = (0..d).map(|k| fs.chi.derivative(0, k)).collect();
    for node in 0..n {
        let r = embed(&spec.coords(node));
        let av = a.map(|f| f(fs.t(), &r)).unwrap_or([0.0; 3]);
        for k in 0..d {
            let mv = gs[k][node] - params.e / params.c * av[k] + fs.xi.get(0, node) * gc[k][node];
            v.set(k, node, mv / params.m);
        }
    }
    Ok(v)
}

/// Outcome of one spin-field step.
#[derive(Debug, Clone, Default)]
pub struct SpinStepReport {
    pub advection: StepReport,
    /// Nodes at a pole, where `χ` was frozen.
    pub poles: Vec<usize>,
}

/// Semi-Lagrangian step of `∂ξ/∂t + (v·∇)ξ = ∂H_sp/∂χ` and
/// `∂χ/∂t + (v·∇)χ = −∂H_sp/∂ξ`, with `v` held fixed over the step.
/// Returns the advanced `(ξ, χ)`.
pub fn step_dipole_spin_fields(
    fs: &DipoleFieldSet,
    velocity: &GridField,
    params: &DipoleParams,
    magnetic: &(dyn Fn(f64, &[f64; 3]) -> [f64; 3] + Sync),
    dt: f64,
) -> Result<(GridField, GridField, SpinStepReport)> {
    params.validate()?;
    let spec = &fs.xi.spec;
    if velocity.spec != *spec || velocity.components != spec.dims() {
        return Err(Error::contract("velocity must be a vector field on the spin-field grid"));
    }
    let n = spec.node_count();
    let mut packed = GridField::zeros(spec, 2, fs.t());
    packed.component_mut(0).copy_from_slice(fs.xi.component(0));
    packed.component_mut(1).copy_from_slice(fs.chi.component(0));
    let speed = |_: f64, x: &[f64], _: &[f64], out: &mut [f64]| {
        velocity.interpolate_all(x, 4, out);
    };
    let mag = params.spin_mag;
    let source = |t: f64, x: &[f64], u: &[f64], out: &mut [f64]| {
        let xi = u[0].clamp(-mag, mag);
        let h = magnetic(t, &embed(x));
        let (_, d_xi, d_chi) = spin_hamiltonian(params, xi, u[1], h);
        out[0] = d_chi;
        out[1] = if near_pole(xi, mag) { 0.0 } else { -d_xi };
    };
    let g_now = {
        let mut g = velocity.clone();
        g.t = fs.t();
        g
    };
    let (next, advection) = advect::semi_lagrangian_step_with(&packed, &g_now, &speed, &source, dt)?;
    let mut xi = GridField::zeros(spec, 1, next.t);
    let mut chi = GridField::zeros(spec, 1, next.t);
    xi.component_mut(0).copy_from_slice(next.component(0));
    chi.component_mut(0).copy_from_slice(next.component(1));
    let mut poles = Vec::new();
    for node in 0..n {
        let x = xi.get(0, node);
        if x.abs() > mag + 1e-10 {
            return Err(Error::scheme(format!(
                "spin projection {x} exceeds {mag} at node {node} (x = {:?})",
                spec.coords(node)
            )));
        }
        if near_pole(x, mag) {
            // χ is undefined here; keep the previous value
            chi.set(0, node, fs.chi.get(0, node));
            poles.push(node);
        }
    }
    if !poles.is_empty() {
        let mut flags = vec![false; n];
        for &p in &poles {
            flags[p] = true;
        }
        chi.invalid = Some(flags);
    }
    Ok((xi, chi, SpinStepReport { advection, poles }))
}

/// Residual of the dipole Hamilton-Jacobi equation at every node, from
/// two consecutive field sets, evaluated at their time midpoint:
/// `∂S/∂t + ξ ∂χ/∂t + |∇S − (e/c)A + ξ∇χ|²/2m + eφ + H_sp`.
/// Nodes without a central stencil are flagged invalid.
pub fn dipole_hj_residual(
    fs0: &DipoleFieldSet,
    fs1: &DipoleFieldSet,
    params: &DipoleParams,
    phi: Option<&(dyn Fn(f64, &[f64; 3]) -> f64 + Sync)>,
    a: VectorPotential<'_>,
    magnetic: &(dyn Fn(f64, &[f64; 3]) -> [f64; 3] + Sync),
) -> Result<GridField> {
    params.validate()?;
    let spec = &fs0.s.spec;
    if fs1.s.spec != *spec || !(fs1.t() > fs0.t()) {
        return Err(Error::contract("residual needs two increasing field sets on one grid"));
    }
    let d = spec.dims();
    let n = spec.node_count();
    let dt = fs1.t() - fs0.t();
    let t = 0.5 * (fs0.t() + fs1.t());
    let mut out = GridField::zeros(spec, 1, t);
    let mut invalid = vec![false; n];
    let avg = |f0: &GridField, f1: &GridField, node| 0.5 * (f0.get(0, node) + f1.get(0, node));
    for node in 0..n {
        if !spec.is_interior(node) {
            invalid[node] = true;
            continue;
        }
        let r = embed(&spec.coords(node));
        let xi = avg(&fs0.xi, &fs1.xi, node);
        let chi = avg(&fs0.chi, &fs1.chi, node);
        let av = a.map(|f| f(t, &r)).unwrap_or([0.0; 3]);
        let mut kinetic = [0.0; 3];
        for k in 0..3 {
            kinetic[k] = -params.e / params.c * av[k];
        }
        for k in 0..d {
            let gs = 0.5 * (fs0.s.central_diff(0, node, k)? + fs1.s.central_diff(0, node, k)?);
            let gc = 0.5 * (fs0.chi.central_diff(0, node, k)? + fs1.chi.central_diff(0, node, k)?);
            kinetic[k] += gs + xi * gc;
        }
        let st = (fs1.s.get(0, node) - fs0.s.get(0, node)) / dt;
        let ct = (fs1.chi.get(0, node) - fs0.chi.get(0, node)) / dt;
        let k2 = kinetic.iter().map(|x| x * x).sum::<f64>();
        let (h_sp, _, _) = spin_hamiltonian(params, xi.clamp(-params.spin_mag, params.spin_mag), chi, magnetic(t, &r));
        let pot = phi.map(|f| params.e * f(t, &r)).unwrap_or(0.0);
        out.values[node] = st + xi * ct + k2 / (2.0 * params.m) + pot + h_sp;
    }
    out.invalid = Some(invalid);
    Ok(out)
}

/// Conservative density step driven by the dipole velocity.
pub fn dipole_continuity_step(fs: &DipoleFieldSet, velocity: &GridField, dt: f64) -> Result<(GridField, DensityReport)> {
    advect::conservative_step(velocity, &fs.rho, dt)
}

/// Scalar potential `φ(t, r)`.
pub type ScalarPotential<'a> = Option<&'a (dyn Fn(f64, &[f64; 3]) -> f64 + Sync)>;

/// External potentials and fields driving an Eulerian dipole run.
#[derive(Clone, Copy)]
pub struct DipoleDrive<'a> {
    pub phi: ScalarPotential<'a>,
    pub vector: VectorPotential<'a>,
    pub magnetic: &'a (dyn Fn(f64, &[f64; 3]) -> [f64; 3] + Sync),
}

/// Advances `S`, `ξ`, `χ` and `ρ` by one step. A predictor step with the
/// current velocity supplies the end-of-step velocity; the corrector
/// repeats the step with the time-centred average. Along the flow
/// `DS/Dt = m|v|²/2 + (e/c) v·A − eφ − H_sp + ξ ∂H_sp/∂ξ`, which follows
/// from the dipole Hamilton-Jacobi equation and the `χ` transport law.
pub fn step_dipole_fields(
    fs: &DipoleFieldSet,
    params: &DipoleParams,
    drive: DipoleDrive<'_>,
    dt: f64,
) -> Result<(DipoleFieldSet, SpinStepReport, DensityReport)> {
    let v_now = dipole_velocity_from_fields(fs, params, drive.vector)?;
    let (predicted, _, _) = advance_with_velocity(fs, params, drive, &v_now, dt)?;
    let v_end = dipole_velocity_from_fields(&predicted, params, drive.vector)?;
    let mut v_mid = v_now.clone();
    for (m, e) in v_mid.values.iter_mut().zip(&v_end.values) {
        *m = 0.5 * (*m + e);
    }
    advance_with_velocity(fs, params, drive, &v_mid, dt)
}

fn advance_with_velocity(
    fs: &DipoleFieldSet,
    params: &DipoleParams,
    drive: DipoleDrive<'_>,
    velocity: &GridField,
    dt: f64,
) -> Result<(DipoleFieldSet, SpinStepReport, DensityReport)> {
    let spec = &fs.s.spec;
    let n = spec.node_count();
    let d = spec.dims();
    let mag = params.spin_mag;
    let mut packed = GridField::zeros(spec, 3, fs.t());
    packed.component_mut(0).copy_from_slice(fs.s.component(0));
    packed.component_mut(1).copy_from_slice(fs.xi.component(0));
    packed.component_mut(2).copy_from_slice(fs.chi.component(0));
    let speed = |_: f64, x: &[f64], _: &[f64], out: &mut [f64]| {
        velocity.interpolate_all(x, 4, out);
    };
    let source = |t: f64, x: &[f64], u: &[f64], out: &mut [f64]| {
        let r = embed(x);
        let xi = u[1].clamp(-mag, mag);
        let (h_sp, d_xi, d_chi) = spin_hamiltonian(params, xi, u[2], (drive.magnetic)(t, &r));
        let mut v = [0.0; 3];
        velocity.interpolate_all(x, 4, &mut v[..d]);
        let a = drive.vector.map(|f| f(t, &r)).unwrap_or([0.0; 3]);
        let v2: f64 = v.iter().map(|c| c * c).sum();
        let va: f64 = v.iter().zip(&a).map(|(p, q)| p * q).sum();
        let pot = drive.phi.map(|f| params.e * f(t, &r)).unwrap_or(0.0);
        out[0] = 0.5 * params.m * v2 + params.e / params.c * va - pot - h_sp + xi * d_xi;
        out[1] = d_chi;
        out[2] = if near_pole(xi, mag) { 0.0 } else { -d_xi };
    };
    let mut g_now = velocity.clone();
    g_now.t = fs.t();
    let (next, advection) = advect::semi_lagrangian_step_with(&packed, &g_now, &speed, &source, dt)?;
    let (mut rho, density) = advect::conservative_step(&g_now, &fs.rho, dt)?;
    rho.t = next.t;
    let take = |c: usize| {
        let mut f = GridField::zeros(spec, 1, next.t);
        f.component_mut(0).copy_from_slice(next.component(c));
        f
    };
    let (s_new, xi, mut chi) = (take(0), take(1), take(2));
    let mut poles = Vec::new();
    for node in 0..n {
        let x = xi.get(0, node);
        if x.abs() > mag + 1e-10 {
            return Err(Error::scheme(format!(
                "spin projection {x} exceeds {mag} at node {node} (x = {:?})",
                spec.coords(node)
            )));
        }
        if near_pole(x, mag) {
            chi.set(0, node, fs.chi.get(0, node));
            poles.push(node);
        }
    }
    let next_set = DipoleFieldSet {
        s: s_new,
        xi: clamp_field(xi, mag),
        chi,
        rho,
    };
    Ok((next_set, SpinStepReport { advection, poles }, density))
}

fn clamp_field(mut f: GridField, mag: f64) -> GridField {
    for v in f.values.iter_mut() {
        *v = v.clamp(-mag, mag);
    }
    f
}

/// Evolves a field set to `t_end`, keeping every `cadence`-th step plus the
/// first and last.
pub fn run_dipole_fields(
    fs0: &DipoleFieldSet,
    params: &DipoleParams,
    drive: DipoleDrive<'_>,
    dt: f64,
    t_end: f64,
    cadence: usize,
) -> Result<Vec<DipoleFieldSet>> {
    params.validate()?;
    if !(dt > 0.0) || !(t_end > fs0.t()) {
        return Err(Error::config("need dt > 0 and t_end beyond the initial time"));
    }
    let mut fs = fs0.clone();
    let mut out = vec![fs.clone()];
    let tol = 1e-12 * t_end.abs().max(1.0);
    let mut step = 0usize;
    while fs.t() < t_end - tol {
        let h = dt.min(t_end - fs.t());
        fs = step_dipole_fields(&fs, params, drive, h)?.0;
        step += 1;
        if step % cadence.max(1) == 0 || fs.t() >= t_end - tol {
            out.push(fs.clone());
        }
    }
    Ok(out)
}
