//! Hamilton-Jacobi layer in configuration space: action fields, residual
//! checks, characteristic construction of `S` and trajectory recovery by
//! the Jacobi theorem.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::{self, Bindings, Expr, Symbols, Var};
use crate::grid::{Axes, Boundary, GridField, GridSpec};
use crate::lagrangian::{first_crossing, flow_determinant, outflow_labels, PhaseState, Trajectory};
use crate::model::SystemModel;

/// Anything that can supply `∇S(t, q)`.
pub trait ActionGradient: Sync {
    fn dim(&self) -> usize;
    fn gradient(&self, t: f64, q: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Closed-form action `S(t, q)` with symbolic derivatives.
#[derive(Debug, Clone)]
pub struct AnalyticAction {
    dims: usize,
    s: Expr,
    ds_dt: Expr,
    grad: Vec<Expr>,
}

impl AnalyticAction {
    /// Parses `S` over `t` and `q1..qs` (aliases `x, y, z`).
    pub fn parse(dims: usize, text: &str) -> Result<Self> {
        let symbols = Symbols {
            dims,
            momenta: false,
            betas: false,
        };
        Ok(Self::from_expr(dims, expr::parse(text, symbols)?))
    }

    pub fn from_expr(dims: usize, s: Expr) -> Self {
        AnalyticAction {
            dims,
            ds_dt: s.derivative(Var::T),
            grad: (0..dims).map(|k| s.derivative(Var::Q(k))).collect(),
            s,
        }
    }

    pub fn expr(&self) -> &Expr {
        &self.s
    }

    pub fn value(&self, t: f64, q: &[f64]) -> Result<f64> {
        self.s.eval(&Bindings::new(t, q, &[]))
    }

    pub fn time_derivative(&self, t: f64, q: &[f64]) -> Result<f64> {
        self.ds_dt.eval(&Bindings::new(t, q, &[]))
    }

    /// Samples `S(t, ·)` on a grid.
    pub fn sample(&self, spec: &GridSpec, t: f64) -> Result<GridField> {
        GridField::try_from_fn(spec, 1, t, |x, out| {
            out[0] = self.value(t, x)?;
            Ok(())
        })
    }
}

impl ActionGradient for AnalyticAction {
    fn dim(&self) -> usize {
        self.dims
    }

    fn gradient(&self, t: f64, q: &[f64], out: &mut [f64]) -> Result<()> {
        let b = Bindings::new(t, q, &[]);
        for (o, e) in out.iter_mut().zip(&self.grad) {
            *o = e.eval(&b)?;
        }
        Ok(())
    }
}

/// Time sequence of action snapshots on one grid.
#[derive(Debug, Clone)]
pub struct ActionField {
    pub model: String,
    pub axes: Axes,
    pub snapshots: Vec<GridField>,
    gradients: Vec<GridField>,
}

impl ActionField {
    pub fn new(model: impl Into<String>, snapshots: Vec<GridField>) -> Result<Self> {
        let first = snapshots
            .first()
            .ok_or_else(|| Error::contract("an action field needs at least one snapshot"))?;
        if snapshots.iter().any(|s| s.spec != first.spec || s.components != 1) {
            return Err(Error::contract("action snapshots must be scalar fields on one grid"));
        }
        if snapshots.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::contract("action snapshot times must increase"));
        }
        if snapshots.iter().any(|s| s.values.iter().any(|v| !v.is_finite())) {
            return Err(Error::contract("action snapshots must be finite"));
        }
        let gradients = snapshots.iter().map(|s| s.gradient(0)).collect();
        Ok(ActionField {
            model: model.into(),
            axes: first.axes,
            snapshots,
            gradients,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.snapshots[0].spec
    }

    pub fn last(&self) -> &GridField {
        self.snapshots.last().expect("non-empty")
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }
}

impl ActionGradient for ActionField {
    fn dim(&self) -> usize {
        self.spec().dims()
    }

    /// Cubic in space, linear in time between snapshots.
    fn gradient(&self, t: f64, q: &[f64], out: &mut [f64]) -> Result<()> {
        let spec = self.spec();
        let (t0, t1) = (self.snapshots[0].t, self.last().t);
        let slack = 1e-9 * (t1 - t0).abs().max(1.0);
        if !spec.contains(q) || t < t0 - slack || t > t1 + slack {
            return Err(Error::DomainExit { t });
        }
        let i = self.snapshots.partition_point(|s| s.t <= t).clamp(1, self.snapshots.len().max(2) - 1);
        if self.snapshots.len() == 1 {
            self.gradients[0].interpolate_all(q, 4, out);
            return Ok(());
        }
        let (a, b) = (&self.gradients[i - 1], &self.gradients[i]);
        let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let mut ga = vec![0.0; out.len()];
        a.interpolate_all(q, 4, &mut ga);
        b.interpolate_all(q, 4, out);
        for (o, x) in out.iter_mut().zip(&ga) {
            *o = (1.0 - w) * x + w * *o;
        }
        Ok(())
    }
}

fn require_hamiltonian(model: &SystemModel) -> Result<&crate::model::Hamiltonian> {
    model
        .hamiltonian()
        .ok_or_else(|| Error::contract(format!("model `{}` carries no Hamiltonian", model.name())))
}

/// `∂S/∂t + H(t, q, ∇S)` with symbolic derivatives.
pub fn hj_residual(model: &SystemModel, action: &AnalyticAction, t: f64, q: &[f64]) -> Result<f64> {
    let h = require_hamiltonian(model)?;
    let mut p = vec![0.0; model.dim()];
    action.gradient(t, q, &mut p)?;
    Ok(action.time_derivative(t, q)? + (h.energy)(t, q, &p))
}

/// Residual of the damped equation `∂S/∂t + H(t, q, ∇S) + (β/m) S`, where
/// `model` holds the conservative part. The result depends on the additive
/// constant of `S`: shifting `S` by `k` shifts the residual by `(β/m) k`.
pub fn hj_damped_residual(
    model: &SystemModel,
    m: f64,
    beta: f64,
    action: &AnalyticAction,
    t: f64,
    q: &[f64],
) -> Result<f64> {
    let r = hj_residual(model, action, t, q)?;
    if beta == 0.0 {
        return Ok(r);
    }
    Ok(r + beta / m * action.value(t, q)?)
}

fn check_pair(s0: &GridField, s1: &GridField) -> Result<()> {
    if s0.spec != s1.spec || s0.components != 1 || s1.components != 1 {
        return Err(Error::contract("residual needs two scalar snapshots on one grid"));
    }
    if !(s1.t > s0.t) {
        return Err(Error::contract("second snapshot must be later than the first"));
    }
    Ok(())
}

/// Finite-difference pieces at the time midpoint of a snapshot pair:
/// `(S, ∂S/∂t, ∇S)`.
fn pair_terms(s0: &GridField, s1: &GridField, node: usize) -> Result<(f64, f64, Vec<f64>)> {
    let dims = s0.dims();
    let mut grad = vec![0.0; dims];
    for (k, g) in grad.iter_mut().enumerate() {
        *g = 0.5 * (s0.central_diff(0, node, k)? + s1.central_diff(0, node, k)?);
    }
    let s = 0.5 * (s0.get(0, node) + s1.get(0, node));
    let st = (s1.get(0, node) - s0.get(0, node)) / (s1.t - s0.t);
    Ok((s, st, grad))
}

/// Residual at a grid node from two consecutive snapshots, evaluated at
/// their time midpoint with central differences.
pub fn hj_residual_snapshots(model: &SystemModel, s0: &GridField, s1: &GridField, node: usize) -> Result<f64> {
    hj_damped_residual_snapshots(model, 1.0, 0.0, s0, s1, node)
}

pub fn hj_damped_residual_snapshots(
    model: &SystemModel,
    m: f64,
    beta: f64,
    s0: &GridField,
    s1: &GridField,
    node: usize,
) -> Result<f64> {
    check_pair(s0, s1)?;
    let h = require_hamiltonian(model)?;
    let (s, st, grad) = pair_terms(s0, s1, node)?;
    let t = 0.5 * (s0.t + s1.t);
    let x = s0.spec.coords(node);
    let r = st + (h.energy)(t, &x, &grad);
    Ok(if beta == 0.0 { r } else { r + beta / m * s })
}

/// Residual at every node; nodes without a central stencil or flagged in
/// either snapshot are marked invalid.
pub fn hj_residual_field(model: &SystemModel, s0: &GridField, s1: &GridField) -> Result<GridField> {
    check_pair(s0, s1)?;
    require_hamiltonian(model)?;
    let spec = &s0.spec;
    let n = spec.node_count();
    let mut out = GridField::zeros(spec, 1, 0.5 * (s0.t + s1.t)).with_axes(s0.axes);
    let mut invalid = vec![false; n];
    for node in 0..n {
        if !s0.is_valid(node) || !s1.is_valid(node) {
            invalid[node] = true;
            continue;
        }
        match hj_residual_snapshots(model, s0, s1, node) {
            Ok(r) => out.values[node] = r,
            Err(Error::OutOfStencil(_)) => invalid[node] = true,
            Err(e) => return Err(e),
        }
    }
    out.invalid = Some(invalid);
    Ok(out)
}

/// Largest `|value|` over valid nodes of a scalar field.
pub fn max_valid_abs(field: &GridField) -> f64 {
    (0..field.node_count())
        .filter(|&i| field.is_valid(i))
        .fold(0.0, |m, i| m.max(field.get(0, i).abs()))
}

/// `p = ∇S` by central differences (second-order one-sided at outflow
/// edges).
pub fn momentum_from_action(s: &GridField) -> GridField {
    let mut p = s.gradient(0);
    p.invalid = s.invalid.clone();
    p
}

// ---------------------------------------------------------------------------
// Characteristics

#[derive(Debug, Clone, Copy)]
pub struct CharacteristicOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Scatter back and keep every `cadence`-th step.
    pub cadence: usize,
}

impl CharacteristicOptions {
    pub fn new(dt: f64, t_end: f64) -> Self {
        CharacteristicOptions { dt, t_end, cadence: 1 }
    }

    pub fn with_cadence(mut self, cadence: usize) -> Self {
        self.cadence = cadence.max(1);
        self
    }
}

/// Builds `S(t, q)` by launching one characteristic per node with
/// `p0 = ∇S0`, transporting `dS/dt = p·∂H/∂p − H` along it, and scattering
/// back to the grid with a moving quadratic least-squares fit. Nodes that
/// fall outside the image of the grid are flagged invalid.
pub fn solve_hj_characteristics(model: &SystemModel, s0: &GridField, opts: &CharacteristicOptions) -> Result<ActionField> {
    let h = require_hamiltonian(model)?.clone();
    let spec = s0.spec.clone();
    let s = spec.dims();
    if s != model.dim() || s0.components != 1 {
        return Err(Error::contract("initial action must be a scalar field over the model's configuration space"));
    }
    if !(opts.dt > 0.0) || !(opts.t_end > s0.t) {
        return Err(Error::config("need dt > 0 and t_end beyond the initial time"));
    }
    let labels = outflow_labels(&spec)?;
    let n = spec.node_count();
    let p0 = s0.gradient(0);
    // node-major (q, p, S)
    let width = 2 * s + 1;
    let mut state = vec![0.0; n * width];
    for node in 0..n {
        let row = &mut state[node * width..(node + 1) * width];
        spec.coords_into(node, &mut row[..s]);
        for k in 0..s {
            row[s + k] = p0.get(k, node);
        }
        row[2 * s] = s0.get(0, node);
    }
    let rhs = |t: f64, y: &[f64], out: &mut [f64]| {
        let (q, p) = (&y[..s], &y[s..2 * s]);
        let (dq, rest) = out.split_at_mut(s);
        let (dp, ds) = rest.split_at_mut(s);
        model.velocity(t, q, p, dq);
        model.force(t, q, p, dp);
        ds[0] = p.iter().zip(dq.iter()).map(|(a, b)| a * b).sum::<f64>() - (h.energy)(t, q, p);
    };
    let mut snapshots = vec![s0.clone()];
    let mut guess: Vec<usize> = (0..n).collect();
    let mut t = s0.t;
    let mut step = 0usize;
    let mut prev_min = f64::INFINITY;
    let tol = 1e-12 * opts.t_end.abs().max(1.0);
    while t < opts.t_end - tol {
        let dt = opts.dt.min(opts.t_end - t);
        let failed = state
            .par_chunks_mut(width)
            .map(|y| {
                rk4_generic(&rhs, t, y, dt);
                y.iter().all(|v| v.is_finite())
            })
            .any(|ok| !ok);
        if failed {
            return Err(Error::Blowup { t, q: vec![], p: vec![] });
        }
        let t_next = if dt < opts.dt { opts.t_end } else { s0.t + (step + 1) as f64 * opts.dt };
        let positions: Vec<f64> = state.chunks(width).flat_map(|y| y[..s].to_vec()).collect();
        let det = flow_determinant(&labels, &positions, t_next);
        let min_det = det.values.iter().copied().fold(f64::INFINITY, f64::min);
        if min_det <= 0.0 {
            let tc = first_crossing(&[t, t_next], &[prev_min.min(1.0), min_det], 0.0).unwrap_or(t_next);
            return Err(Error::Caustic { t: tc });
        }
        prev_min = min_det;
        t = t_next;
        step += 1;
        let last = t >= opts.t_end - tol;
        if last || step % opts.cadence == 0 {
            let snap = scatter(&spec, &labels, &state, width, t, &mut guess)?;
            snapshots.push(snap);
        }
    }
    ActionField::new(model.name(), snapshots)
}

fn rk4_generic(f: &impl Fn(f64, &[f64], &mut [f64]), t: f64, y: &mut [f64], dt: f64) {
    let n = y.len();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    f(t, y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * dt * k1[i];
    }
    f(t + 0.5 * dt, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * dt * k2[i];
    }
    f(t + 0.5 * dt, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + dt * k3[i];
    }
    f(t + dt, &tmp, &mut k4);
    for i in 0..n {
        y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Displacement `x - y` with periodic axes folded into half a period.
fn displacement(spec: &GridSpec, x: &[f64], y: &[f64], out: &mut [f64]) {
    for (k, a) in spec.axes().iter().enumerate() {
        let mut d = x[k] - y[k];
        if a.boundary == Boundary::Periodic {
            let l = a.period();
            d -= l * (d / l).round();
        }
        out[k] = d;
    }
}

fn step_label(spec: &GridSpec, idx: &mut [usize], k: usize, delta: isize) {
    let n = spec.axis(k).nodes as isize;
    let v = idx[k] as isize + delta;
    idx[k] = if spec.axis(k).boundary == Boundary::Periodic {
        v.rem_euclid(n) as usize
    } else {
        v.clamp(0, n - 1) as usize
    };
}

/// Local label Jacobian `∂X/∂L` (in label index units) at a label node.
fn label_jacobian(spec: &GridSpec, pos: &dyn Fn(usize) -> Vec<f64>, idx: &[usize]) -> DMatrix<f64> {
    let s = spec.dims();
    let node = spec.flat_index(idx);
    let x0 = pos(node);
    let mut jac = DMatrix::zeros(s, s);
    let mut d = vec![0.0; s];
    for b in 0..s {
        let n = spec.axis(b).nodes;
        let periodic = spec.axis(b).boundary == Boundary::Periodic;
        let (lo, hi, span) = if periodic || (idx[b] > 0 && idx[b] + 1 < n) {
            let mut l = idx.to_vec();
            let mut h = idx.to_vec();
            step_label(spec, &mut l, b, -1);
            step_label(spec, &mut h, b, 1);
            (l, h, 2.0)
        } else if idx[b] == 0 {
            let mut h = idx.to_vec();
            step_label(spec, &mut h, b, 1);
            (idx.to_vec(), h, 1.0)
        } else {
            let mut l = idx.to_vec();
            step_label(spec, &mut l, b, -1);
            (l, idx.to_vec(), 1.0)
        };
        let (xl, xh) = (pos(spec.flat_index(&lo)), pos(spec.flat_index(&hi)));
        // unwrap both ends relative to the center
        let mut dl = vec![0.0; s];
        displacement(spec, &xh, &x0, &mut d);
        displacement(spec, &xl, &x0, &mut dl);
        for a in 0..s {
            jac[(a, b)] = (d[a] - dl[a]) / span;
        }
    }
    jac
}

fn monomials(d: &[f64]) -> Vec<f64> {
    let s = d.len();
    let mut row = Vec::with_capacity((s + 1) * (s + 2) / 2);
    row.push(1.0);
    row.extend_from_slice(d);
    for a in 0..s {
        for b in a..s {
            row.push(d[a] * d[b]);
        }
    }
    row
}

/// Scatters characteristic values of `S` back onto the grid nodes.
fn scatter(
    spec: &GridSpec,
    labels: &GridSpec,
    state: &[f64],
    width: usize,
    t: f64,
    guess: &mut [usize],
) -> Result<GridField> {
    let s = spec.dims();
    let n = spec.node_count();
    let pos = |node: usize| state[node * width..node * width + s].to_vec();
    let value = |node: usize| state[node * width + 2 * s];
    let h_min = spec.min_spacing();
    let results: Vec<Result<(f64, bool, usize)>> = (0..n)
        .into_par_iter()
        .map(|node| {
            let x = spec.coords(node);
            let mut idx = spec.multi_index(guess[node]);
            let mut d = vec![0.0; s];
            let mut r = vec![0.0; s];
            let mut converged = false;
            for _ in 0..64 {
                let jac = label_jacobian(spec, &pos, &idx);
                displacement(spec, &x, &pos(spec.flat_index(&idx)), &mut d);
                let Some(inv) = jac.clone().try_inverse() else {
                    return Err(Error::Coverage { node });
                };
                let step = &inv * DVector::from_column_slice(&d);
                let mut moved = false;
                for k in 0..s {
                    r[k] = step[k];
                    // a point midway between two labels would otherwise bounce
                    let jump = if r[k].abs() <= 0.5 + 1e-9 { 0 } else { r[k].round().clamp(-4.0, 4.0) as isize };
                    if jump != 0 {
                        let before = idx[k];
                        step_label(spec, &mut idx, k, jump);
                        moved |= idx[k] != before;
                    }
                }
                if !moved {
                    converged = true;
                    break;
                }
            }
            // position of x in label units relative to the found node
            let outside = (0..s).any(|k| {
                let a = labels.axis(k);
                if spec.axis(k).boundary == Boundary::Periodic {
                    return false;
                }
                let l = idx[k] as f64 + r[k];
                l < -1e-6 || l > (a.nodes - 1) as f64 + 1e-6
            });
            if !converged && !outside {
                return Err(Error::Coverage { node });
            }
            // 3^s neighborhood, shifted inward at outflow edges
            let mut center = idx.clone();
            for k in 0..s {
                if spec.axis(k).boundary == Boundary::Outflow {
                    center[k] = center[k].clamp(1, spec.axis(k).nodes - 2);
                }
            }
            let count = 3usize.pow(s as u32);
            let terms = (s + 1) * (s + 2) / 2;
            let mut a = DMatrix::zeros(count, terms);
            let mut b = DVector::zeros(count);
            let mut nb = center.clone();
            for c in 0..count {
                let mut code = c;
                nb.copy_from_slice(&center);
                for k in 0..s {
                    let delta = (code % 3) as isize - 1;
                    code /= 3;
                    step_label(spec, &mut nb, k, delta);
                }
                let j = spec.flat_index(&nb);
                displacement(spec, &pos(j), &x, &mut d);
                for v in d.iter_mut() {
                    *v /= h_min;
                }
                for (col, m) in monomials(&d).into_iter().enumerate() {
                    a[(c, col)] = m;
                }
                b[c] = value(j);
            }
            let svd = a.svd(true, true);
            let sv = &svd.singular_values;
            let (smax, smin) = sv.iter().fold((0.0f64, f64::INFINITY), |(hi, lo), v| (hi.max(*v), lo.min(*v)));
            if !(smin > 1e-10 * smax) {
                return Err(Error::Coverage { node });
            }
            let coef = svd.solve(&b, 0.0).map_err(|_| Error::Coverage { node })?;
            Ok((coef[0], outside, spec.flat_index(&idx)))
        })
        .collect();
    let mut field = GridField::zeros(spec, 1, t);
    let mut invalid = vec![false; n];
    for (node, r) in results.into_iter().enumerate() {
        let (v, outside, found) = r?;
        field.values[node] = v;
        invalid[node] = outside;
        guess[node] = found;
    }
    if invalid.iter().any(|b| *b) {
        field.invalid = Some(invalid);
    }
    Ok(field)
}

// ---------------------------------------------------------------------------
// Jacobi theorem

/// `(t, x, β) -> value`
pub type IntegralFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// `(t, x, β, out)`
pub type IntegralPartials = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Complete integral `Φ(t, x; β)` with `x` coordinates (q-representation)
/// or momenta (p-representation). The additive constant is irrelevant.
#[derive(Clone)]
pub struct CompleteIntegral {
    pub dims: usize,
    pub axes: Axes,
    phi: IntegralFn,
    d_beta: Option<IntegralPartials>,
    d_x: Option<IntegralPartials>,
    /// `J[i * s + j] = ∂²Φ/∂β_i∂x_j`
    d_beta_x: Option<IntegralPartials>,
}

impl std::fmt::Debug for CompleteIntegral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompleteIntegral")
            .field("dims", &self.dims)
            .field("axes", &self.axes)
            .finish_non_exhaustive()
    }
}

const FD_STEP: f64 = 1e-5;

impl CompleteIntegral {
    /// Integral given as a closure; partials default to central differences.
    pub fn from_fn(dims: usize, axes: Axes, phi: IntegralFn) -> Self {
        CompleteIntegral {
            dims,
            axes,
            phi,
            d_beta: None,
            d_x: None,
            d_beta_x: None,
        }
    }

    pub fn with_beta_partials(mut self, f: IntegralPartials) -> Self {
        self.d_beta = Some(f);
        self
    }

    pub fn with_x_partials(mut self, f: IntegralPartials) -> Self {
        self.d_x = Some(f);
        self
    }

    pub fn with_mixed_partials(mut self, f: IntegralPartials) -> Self {
        self.d_beta_x = Some(f);
        self
    }

    /// Parses `Φ` over `t`, `b1..bs` and either `q*` or `p*` depending on
    /// `axes`; every partial is taken symbolically.
    pub fn parse(dims: usize, axes: Axes, text: &str) -> Result<Self> {
        let e = expr::parse(text, Symbols::with_betas(dims))?;
        let wrong = |k| match axes {
            Axes::Q => Var::P(k),
            Axes::P => Var::Q(k),
        };
        if let Some(k) = (0..dims).find(|&k| e.depends_on(wrong(k))) {
            return Err(Error::config(format!(
                "complete integral in the {} representation must not use {}{}",
                axes.tag(),
                if axes == Axes::Q { "p" } else { "q" },
                k + 1
            )));
        }
        let var = move |k| match axes {
            Axes::Q => Var::Q(k),
            Axes::P => Var::P(k),
        };
        let bind = move |t: f64, x: &[f64], beta: &[f64], f: &mut dyn FnMut(&Bindings<'_>)| {
            let b = match axes {
                Axes::Q => Bindings::new(t, x, &[]),
                Axes::P => Bindings::new(t, &[], x),
            }
            .with_beta(beta);
            f(&b)
        };
        let eval_many = move |exprs: Vec<Expr>| -> IntegralPartials {
            Arc::new(move |t, x, beta, out| {
                bind(t, x, beta, &mut |b| {
                    for (o, e) in out.iter_mut().zip(&exprs) {
                        *o = e.eval(b).unwrap_or(f64::NAN);
                    }
                })
            })
        };
        let d_beta: Vec<Expr> = (0..dims).map(|i| e.derivative(Var::B(i))).collect();
        let d_x: Vec<Expr> = (0..dims).map(|j| e.derivative(var(j))).collect();
        let mixed: Vec<Expr> = d_beta
            .iter()
            .flat_map(|db| (0..dims).map(move |j| db.derivative(var(j))))
            .collect();
        let phi_expr = e.clone();
        let phi: IntegralFn = Arc::new(move |t, x, beta| {
            let mut v = f64::NAN;
            bind(t, x, beta, &mut |b| v = phi_expr.eval(b).unwrap_or(f64::NAN));
            v
        });
        Ok(Self::from_fn(dims, axes, phi)
            .with_beta_partials(eval_many(d_beta))
            .with_x_partials(eval_many(d_x))
            .with_mixed_partials(eval_many(mixed)))
    }

    pub fn value(&self, t: f64, x: &[f64], beta: &[f64]) -> f64 {
        (self.phi)(t, x, beta)
    }

    pub fn beta_partials(&self, t: f64, x: &[f64], beta: &[f64], out: &mut [f64]) {
        match &self.d_beta {
            Some(f) => f(t, x, beta, out),
            None => {
                let mut b = beta.to_vec();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = central(&mut b, i, |b| (self.phi)(t, x, b));
                }
            }
        }
    }

    pub fn x_partials(&self, t: f64, x: &[f64], beta: &[f64], out: &mut [f64]) {
        match &self.d_x {
            Some(f) => f(t, x, beta, out),
            None => {
                let mut y = x.to_vec();
                for (j, o) in out.iter_mut().enumerate() {
                    *o = central(&mut y, j, |y| (self.phi)(t, y, beta));
                }
            }
        }
    }

    /// `J[i][j] = ∂²Φ/∂β_i∂x_j`
    pub fn mixed_partials(&self, t: f64, x: &[f64], beta: &[f64]) -> DMatrix<f64> {
        let s = self.dims;
        let mut flat = vec![0.0; s * s];
        match &self.d_beta_x {
            Some(f) => f(t, x, beta, &mut flat),
            None => {
                let mut y = x.to_vec();
                let (mut hi, mut lo) = (vec![0.0; s], vec![0.0; s]);
                for j in 0..s {
                    let x0 = y[j];
                    let h = FD_STEP * x0.abs().max(1.0);
                    y[j] = x0 + h;
                    self.beta_partials(t, &y, beta, &mut hi);
                    y[j] = x0 - h;
                    self.beta_partials(t, &y, beta, &mut lo);
                    y[j] = x0;
                    for i in 0..s {
                        flat[i * s + j] = (hi[i] - lo[i]) / (2.0 * h);
                    }
                }
            }
        }
        DMatrix::from_row_slice(s, s, &flat)
    }
}

fn central(v: &mut [f64], i: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let x0 = v[i];
    let h = FD_STEP * x0.abs().max(1.0);
    v[i] = x0 + h;
    let hi = f(v);
    v[i] = x0 - h;
    let lo = f(v);
    v[i] = x0;
    (hi - lo) / (2.0 * h)
}

const NEWTON_ITERATIONS: usize = 50;
const NEWTON_HALVINGS: usize = 8;
/// Roots where `|det ∂²Φ/∂β∂x|` falls below this are reported as
/// degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-6;

/// Solves `∂Φ/∂β(t, x; β) = α` for `x` by damped Newton iteration.
pub(crate) fn solve_jacobi(ci: &CompleteIntegral, t: f64, beta: &[f64], alpha: &[f64], seed: &[f64]) -> Result<Vec<f64>> {
    let s = ci.dims;
    let mut x = seed.to_vec();
    let mut f = vec![0.0; s];
    let residual = |x: &[f64], f: &mut [f64]| -> f64 {
        ci.beta_partials(t, x, beta, f);
        for (fi, a) in f.iter_mut().zip(alpha) {
            *fi -= a;
        }
        f.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let scale = alpha.iter().fold(1.0f64, |m, a| m.max(a.abs()));
    let mut norm = residual(&x, &mut f);
    let mut trial = vec![0.0; s];
    let mut ft = vec![0.0; s];
    for _ in 0..NEWTON_ITERATIONS {
        if !norm.is_finite() {
            break;
        }
        if norm <= 1e-13 * scale {
            return finish(ci, t, beta, x);
        }
        let jac = ci.mixed_partials(t, &x, beta);
        let det = jac.determinant();
        let Some(inv) = jac.try_inverse() else {
            return Err(Error::Degenerate { t, det });
        };
        let step = -(inv * DVector::from_column_slice(&f));
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=NEWTON_HALVINGS {
            for k in 0..s {
                trial[k] = x[k] + lambda * step[k];
            }
            let nt = residual(&trial, &mut ft);
            if nt.is_finite() && nt < norm {
                x.copy_from_slice(&trial);
                f.copy_from_slice(&ft);
                norm = nt;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        let tiny = step.iter().zip(&x).all(|(d, xi)| d.abs() <= 1e-15 * xi.abs().max(1.0));
        if !accepted {
            if tiny && norm <= 1e-9 * scale {
                return finish(ci, t, beta, x);
            }
            break;
        }
    }
    if norm.is_finite() && norm <= 1e-13 * scale {
        return finish(ci, t, beta, x);
    }
    Err(Error::RootFind { t })
}

fn finish(ci: &CompleteIntegral, t: f64, beta: &[f64], x: Vec<f64>) -> Result<Vec<f64>> {
    let det = ci.mixed_partials(t, &x, beta).determinant();
    if !(det.abs() >= DEGENERACY_THRESHOLD) {
        return Err(Error::Degenerate { t, det });
    }
    Ok(x)
}

fn check_times(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("time grid must be non-empty and strictly increasing"));
    }
    Ok(())
}

/// Recovers `q(t)` from `∂Φ/∂β = α` (q-representation) with `p = ∂Φ/∂q`.
/// Each root seeds the next time.
pub fn jacobi_recover_q(
    ci: &CompleteIntegral,
    beta: &[f64],
    alpha: &[f64],
    t_grid: &[f64],
    seed: &[f64],
) -> Result<Trajectory> {
    if ci.axes != Axes::Q {
        return Err(Error::contract("q-recovery needs a q-representation complete integral"));
    }
    check_times(t_grid)?;
    let s = ci.dims;
    if beta.len() != s || alpha.len() != s || seed.len() != s {
        return Err(Error::contract("β, α and the seed need one entry per degree of freedom"));
    }
    let mut x = seed.to_vec();
    let mut samples = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        x = solve_jacobi(ci, t, beta, alpha, &x)?;
        let mut p = vec![0.0; s];
        ci.x_partials(t, &x, beta, &mut p);
        samples.push(PhaseState::new(t, x.clone(), p));
    }
    Ok(Trajectory {
        model: "jacobi-q".into(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lagrangian::{characteristics_from_action, integrate_trajectory, IntegrationOptions};
    use crate::model::{self, Charge, EmPotentials};
    use std::f64::consts::PI;

    #[test]
    fn free_particle_residual_is_zero() {
        let free = model::free_particle(1, 1.0).unwrap();
        let s = AnalyticAction::parse(1, "2*x - 2^2*t/2").unwrap();
        for &x in &[-1.0, 0.3, 2.0] {
            assert_eq!(hj_residual(&free, &s, 0.7, &[x]).unwrap(), 0.0);
        }
    }

    #[test]
    fn em_uniform_vector_potential_residual() {
        let (a, p0) = (0.4, 1.3);
        let em = model::em_particle(Charge::default(), EmPotentials::constant_vector([a, 0.0, 0.0])).unwrap();
        let s = AnalyticAction::parse(3, &format!("{p0}*x - (({p0} - {a})^2/2)*t")).unwrap();
        let r = hj_residual(&em, &s, 0.9, &[0.1, -0.2, 0.3]).unwrap();
        assert!(r.abs() < 1e-15, "{r}");
    }

    #[test]
    fn damped_residual_examples() {
        let free = model::free_particle(1, 1.0).unwrap();
        let s = AnalyticAction::parse(1, "exp(-t)*x + exp(-2*t)/2").unwrap();
        for &(t, x) in &[(0.0, 0.5), (0.4, -1.0), (2.0, 3.0)] {
            assert!(hj_damped_residual(&free, 1.0, 1.0, &s, t, &[x]).unwrap().abs() < 1e-14);
            assert_eq!(
                hj_damped_residual(&free, 1.0, 0.0, &s, t, &[x]).unwrap(),
                hj_residual(&free, &s, t, &[x]).unwrap()
            );
        }
        let shifted = AnalyticAction::parse(1, "exp(-t)*x + exp(-2*t)/2 + 3").unwrap();
        let (r0, r1) = (
            hj_damped_residual(&free, 1.0, 1.0, &s, 0.3, &[0.2]).unwrap(),
            hj_damped_residual(&free, 1.0, 1.0, &shifted, 0.3, &[0.2]).unwrap(),
        );
        assert!((r1 - r0 - 3.0).abs() < 1e-12);
        // the e^{-βt/m} mode is a gauge freedom
        let gauge = AnalyticAction::parse(1, "exp(-t)*x + exp(-2*t)/2 + 5*exp(-t)").unwrap();
        assert!(hj_damped_residual(&free, 1.0, 1.0, &gauge, 0.3, &[0.2]).unwrap().abs() < 1e-14);
    }

    #[test]
    fn momentum_examples() {
        let spec = GridSpec::line(-1.0, 1.0, 101).unwrap();
        let s = GridField::scalar_from_fn(&spec, 0.0, |x| 3.0 * x[0]);
        assert!(momentum_from_action(&s).values.iter().all(|p| (p - 3.0).abs() < 1e-12));
        let s = GridField::scalar_from_fn(&spec, 0.0, |x| x[0] * x[0] / 2.0);
        let p = momentum_from_action(&s);
        assert!((p.get(0, 75) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn free_characteristics_reproduce_exact_action() {
        let spec = GridSpec::line(-1.0, 1.0, 41).unwrap();
        let free = model::free_particle(1, 1.0).unwrap();
        let p0 = 0.8;
        let s0 = GridField::scalar_from_fn(&spec, 0.0, |x| p0 * x[0]);
        let field = solve_hj_characteristics(&free, &s0, &CharacteristicOptions::new(0.01, 0.5)).unwrap();
        let last = field.last();
        for node in 0..spec.node_count() {
            if last.is_valid(node) {
                let x = spec.coords(node)[0];
                assert!((last.get(0, node) - (p0 * x - p0 * p0 * 0.5 / 2.0)).abs() < 1e-6);
            }
        }
        assert!(!last.is_valid(0));
        assert!(last.is_valid(40));
    }

    #[test]
    fn rest_ensemble_hits_caustic() {
        let spec = GridSpec::line(-1.0, 1.0, 41).unwrap();
        let ho = model::harmonic_oscillator(1, 1.0, 1.0).unwrap();
        let s0 = GridField::scalar_from_fn(&spec, 0.0, |_| 0.0);
        let err = solve_hj_characteristics(&ho, &s0, &CharacteristicOptions::new(1e-3, 3.0).with_cadence(100)).unwrap_err();
        match err {
            Error::Caustic { t } => assert!((t - PI / 2.0).abs() < 0.02, "{t}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oscillator_action_gradient_matches_orbits() {
        let spec = GridSpec::line(-1.0, 1.0, 201).unwrap();
        let ho = model::harmonic_oscillator(1, 1.0, 1.0).unwrap();
        let s0 = GridField::scalar_from_fn(&spec, 0.0, |x| x[0] * x[0] / 2.0);
        let field = solve_hj_characteristics(&ho, &s0, &CharacteristicOptions::new(1e-3, 0.5).with_cadence(50)).unwrap();
        let p = momentum_from_action(field.last());
        for node in 10..191 {
            let x = spec.coords(node)[0];
            // x(t) = x0 (cos t + sin t), p(t) = x0 (cos t - sin t)
            let x0 = x / (0.5f64.cos() + 0.5f64.sin());
            let exact = x0 * (0.5f64.cos() - 0.5f64.sin());
            assert!((p.get(0, node) - exact).abs() < 1e-4, "{node}: {} vs {exact}", p.get(0, node));
        }
        // recovered trajectory through the field
        let tr = characteristics_from_action(&field, 1.0, &[0.3], 0.0, 1e-3, 0.5).unwrap();
        let direct = integrate_trajectory(&ho, &PhaseState::new(0.0, vec![0.3], vec![0.3]), &IntegrationOptions::rk4(1e-3, 0.5)).unwrap();
        assert!((tr.last().q[0] - direct.last().q[0]).abs() < 1e-4);
    }

    #[test]
    fn trajectory_leaving_field_reports_exit_time() {
        let spec = GridSpec::line(-1.0, 1.0, 21).unwrap();
        let free = model::free_particle(1, 1.0).unwrap();
        let s0 = GridField::scalar_from_fn(&spec, 0.0, |x| 2.0 * x[0]);
        let field = solve_hj_characteristics(&free, &s0, &CharacteristicOptions::new(0.01, 1.0)).unwrap();
        match characteristics_from_action(&field, 1.0, &[0.0], 0.0, 0.01, 1.0).unwrap_err() {
            Error::DomainExit { t } => assert!((t - 0.5).abs() < 0.02, "{t}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn analytic_action_characteristics() {
        let s = AnalyticAction::parse(1, "2*x - 2*t").unwrap();
        let tr = characteristics_from_action(&s, 1.0, &[0.5], 0.0, 0.1, 1.0).unwrap();
        assert!((tr.last().q[0] - 2.5).abs() < 1e-12);
        let damped = AnalyticAction::parse(1, "1.5*exp(-t)*x + (1.5^2/2)*exp(-2*t)").unwrap();
        let tr = characteristics_from_action(&damped, 1.0, &[0.0], 0.0, 1e-3, 2.0).unwrap();
        for st in &tr.samples {
            assert!((st.p[0] - 1.5 * (-st.t).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn jacobi_free_particle() {
        let ci = CompleteIntegral::parse(1, Axes::Q, "b1*x - b1^2*t/2").unwrap();
        let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.3).collect();
        let tr = jacobi_recover_q(&ci, &[1.5], &[0.2], &times, &[0.0]).unwrap();
        for s in &tr.samples {
            assert!((s.q[0] - (0.2 + 1.5 * s.t)).abs() < 1e-12);
            assert!((s.p[0] - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_reports_degeneracy() {
        // ∂Φ/∂β does not depend on x
        let ci = CompleteIntegral::parse(1, Axes::Q, "b1*t + x").unwrap();
        assert!(matches!(jacobi_recover_q(&ci, &[1.0], &[0.0], &[0.0], &[0.0]), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn focusing_ensemble_passes_midway_labels() {
        // S = x²/2(t - 2); at t = 0.4 node x = -0.55 sits midway between two labels
        let model = crate::model::free_particle(1, 1.0).unwrap();
        let spec = GridSpec::line(-1.0, 1.0, 81).unwrap();
        let s0 = GridField::scalar_from_fn(&spec, 0.0, |x| -x[0] * x[0] / 4.0);
        let field = solve_hj_characteristics(&model, &s0, &CharacteristicOptions::new(0.01, 0.5)).unwrap();
        let last = field.last();
        for node in 0..81 {
            if last.is_valid(node) {
                let x = spec.coords(node)[0];
                assert!((last.get(0, node) - x * x / (2.0 * (0.5 - 2.0))).abs() < 1e-8, "node {node}");
            }
        }
    }
}
