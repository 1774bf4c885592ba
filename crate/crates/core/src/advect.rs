//! Shared transport schemes: semi-Lagrangian advection of a field carried
//! along characteristics, and conservative upwind transport of a density.
//!
//! Both representations use the same engine. In configuration space the
//! grid axes are coordinates, the carried field is the momentum and the
//! characteristic speed is the velocity map; in momentum space the roles
//! swap.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Boundary, GridField, GridSpec};

/// Characteristic speed or source term: `(t, position, carried, out)`.
pub type PointMap<'a> = &'a (dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Sync);

/// Outcome of one semi-Lagrangian step.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    /// Nodes whose backward foot left an outflow boundary; their value was
    /// extrapolated from the clamped interior stencil.
    pub extrapolated: Vec<usize>,
}

/// Checks `max |g| dt <= 0.5 min h` over the nodes of a speed field.
pub fn check_cfl(speed: &GridField, dt: f64) -> Result<()> {
    let spec = &speed.spec;
    let limit = 0.5 * spec.min_spacing();
    let s = speed.components;
    let mut g = vec![0.0; s];
    let mut worst: Option<(usize, f64)> = None;
    for node in 0..spec.node_count() {
        speed.vector_at(node, &mut g);
        let d = g.iter().map(|x| x * x).sum::<f64>().sqrt() * dt;
        if !(d <= limit) && worst.is_none_or(|(_, w)| d > w) {
            worst = Some((node, d));
        }
    }
    match worst {
        None => Ok(()),
        Some((node, displacement)) => Err(Error::Cfl {
            node,
            coords: spec.coords(node),
            displacement,
            limit,
        }),
    }
}

/// Evaluates `speed(t, x_node, u_node)` at every node.
pub fn speed_field(field: &GridField, speed: PointMap<'_>, t: f64) -> GridField {
    let spec = &field.spec;
    let s = spec.dims();
    let c = field.components;
    let n = spec.node_count();
    let mut nodewise = vec![0.0; n * s];
    nodewise.par_chunks_mut(s).enumerate().for_each(|(node, out)| {
        let mut x = vec![0.0; s];
        let mut u = vec![0.0; c];
        spec.coords_into(node, &mut x);
        field.vector_at(node, &mut u);
        speed(t, &x, &u, out);
    });
    from_node_major(spec, s, t, &nodewise).with_axes(field.axes)
}

fn from_node_major(spec: &GridSpec, components: usize, t: f64, data: &[f64]) -> GridField {
    let n = spec.node_count();
    let mut f = GridField::zeros(spec, components, t);
    for node in 0..n {
        for c in 0..components {
            f.values[c * n + node] = data[node * components + c];
        }
    }
    f
}

/// One semi-Lagrangian step of `∂u/∂t + g·∇u = k` from `field.t` to
/// `field.t + dt`, where `g = speed(t, x, u)` and `k = source(t, x, u)`.
///
/// The backward foot is found by midpoint iteration with the speed
/// re-evaluated at the half step (linear interpolation of the current
/// speed field supplies the first guess); the field is interpolated there
/// with cubic stencils and the source is integrated along the segment by
/// the midpoint rule.
pub fn semi_lagrangian_step(
    field: &GridField,
    speed: PointMap<'_>,
    source: PointMap<'_>,
    dt: f64,
) -> Result<(GridField, StepReport)> {
    let g_now = speed_field(field, speed, field.t);
    semi_lagrangian_step_with(field, &g_now, speed, source, dt)
}

/// As [`semi_lagrangian_step`] with a precomputed speed field at `field.t`.
pub fn semi_lagrangian_step_with(
    field: &GridField,
    g_now: &GridField,
    speed: PointMap<'_>,
    source: PointMap<'_>,
    dt: f64,
) -> Result<(GridField, StepReport)> {
    if !(dt > 0.0) {
        return Err(Error::config(format!("time step must be positive, got {dt}")));
    }
    check_cfl(g_now, dt)?;
    let spec = &field.spec;
    let s = spec.dims();
    let c = field.components;
    let n = spec.node_count();
    let t = field.t;
    let mut out = vec![0.0; n * c];
    let mut outside = vec![false; n];
    out.par_chunks_mut(c)
        .zip(outside.par_iter_mut())
        .enumerate()
        .for_each(|(node, (u_new, flag))| {
            let mut a = vec![0.0; s];
            spec.coords_into(node, &mut a);
            let mut g = vec![0.0; s];
            g_now.vector_at(node, &mut g);
            let mut mid: Vec<f64> = (0..s).map(|k| a[k] - 0.5 * dt * g[k]).collect();
            let mut y = vec![0.0; s];
            let mut u_y = vec![0.0; c];
            let mut k_y = vec![0.0; c];
            let mut u_h = vec![0.0; c];
            for _ in 0..2 {
                g_now.interpolate_all(&mid, 2, &mut g);
                for k in 0..s {
                    y[k] = mid[k] - 0.5 * dt * g[k];
                }
                spec.wrap_point(&mut y);
                field.interpolate_all(&y, 4, &mut u_y);
                source(t, &y, &u_y, &mut k_y);
                for j in 0..c {
                    u_h[j] = u_y[j] + 0.5 * dt * k_y[j];
                }
                speed(t + 0.5 * dt, &mid, &u_h, &mut g);
                for k in 0..s {
                    mid[k] = a[k] - 0.5 * dt * g[k];
                }
            }
            let mut foot: Vec<f64> = (0..s).map(|k| a[k] - dt * g[k]).collect();
            spec.wrap_point(&mut foot);
            spec.wrap_point(&mut mid);
            let mut u_f = vec![0.0; c];
            *flag = field.interpolate_all(&foot, 4, &mut u_f);
            let mut k_f = vec![0.0; c];
            source(t, &foot, &u_f, &mut k_f);
            let u_mid: Vec<f64> = (0..c).map(|j| u_f[j] + 0.5 * dt * k_f[j]).collect();
            let mut k_mid = vec![0.0; c];
            source(t + 0.5 * dt, &mid, &u_mid, &mut k_mid);
            for j in 0..c {
                u_new[j] = u_f[j] + dt * k_mid[j];
            }
        });
    if let Some(node) = (0..n).find(|&i| out[i * c..(i + 1) * c].iter().any(|v| !v.is_finite())) {
        return Err(Error::Blowup {
            t,
            q: spec.coords(node),
            p: (0..c).map(|j| field.get(j, node)).collect(),
        });
    }
    let mut next = from_node_major(spec, c, t + dt, &out).with_axes(field.axes);
    next.invalid = field.invalid.clone();
    let report = StepReport {
        extrapolated: (0..n).filter(|&i| outside[i]).collect(),
    };
    Ok((next, report))
}

// ---------------------------------------------------------------------------
// Conservative density transport

/// Bookkeeping for one density step.
#[derive(Debug, Clone, Default)]
pub struct DensityReport {
    /// Mass that left through outflow boundaries during the step.
    pub boundary_outflow: f64,
    /// Nodes left with a slightly negative value in `[-1e-12, 0)`; they are
    /// kept as computed.
    pub negative_nodes: Vec<usize>,
}

/// Tolerated undershoot below zero before a density update is rejected.
pub const NEGATIVE_DENSITY_TOLERANCE: f64 = 1e-12;

/// First-order upwind finite-volume step of `∂ρ/∂t + ∇·(ρ g) = 0`. Face
/// speeds are the average of the adjacent nodal speeds; outflow boundaries
/// admit no inflow.
pub fn conservative_step(speed: &GridField, rho: &GridField, dt: f64) -> Result<(GridField, DensityReport)> {
    let spec = &rho.spec;
    if speed.spec != *spec || speed.components != spec.dims() || rho.components != 1 {
        return Err(Error::contract(
            "density transport needs a scalar density and a speed field on the same grid",
        ));
    }
    if !(dt > 0.0) {
        return Err(Error::config(format!("time step must be positive, got {dt}")));
    }
    check_cfl(speed, dt)?;
    let n = spec.node_count();
    let s = spec.dims();
    let old = rho.component(0);
    let mut new = old.to_vec();
    let vol = spec.cell_volume();
    let mut outflow = 0.0;
    for k in 0..s {
        let axis = spec.axis(k);
        let ratio = dt / axis.spacing();
        let g = speed.component(k);
        for node in 0..n {
            match spec.neighbor(node, k, 1) {
                Some(right) => {
                    let u = 0.5 * (g[node] + g[right]);
                    let flux = if u > 0.0 { u * old[node] } else { u * old[right] };
                    new[node] -= ratio * flux;
                    new[right] += ratio * flux;
                }
                None => {
                    // last node on an outflow axis: only outgoing flux
                    if g[node] > 0.0 {
                        let loss = ratio * g[node] * old[node];
                        new[node] -= loss;
                        outflow += loss * vol;
                    }
                }
            }
            if axis.boundary == Boundary::Outflow && spec.neighbor(node, k, -1).is_none() && g[node] < 0.0 {
                let loss = -ratio * g[node] * old[node];
                new[node] -= loss;
                outflow += loss * vol;
            }
        }
    }
    let mut negative_nodes = Vec::new();
    for (node, v) in new.iter().enumerate() {
        if *v < -NEGATIVE_DENSITY_TOLERANCE {
            return Err(Error::scheme(format!(
                "density {v:e} at node {node} (x = {:?}) below tolerance after step at t = {}",
                spec.coords(node),
                rho.t
            )));
        }
        if *v < 0.0 {
            negative_nodes.push(node);
        }
    }
    let mut out = GridField::zeros(spec, 1, rho.t + dt).with_axes(rho.axes);
    out.values = new;
    Ok((
        out,
        DensityReport {
            boundary_outflow: outflow,
            negative_nodes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;

    fn periodic_line(n: usize) -> GridSpec {
        GridSpec::new(vec![Axis::periodic(0.0, 1.0, n)]).unwrap()
    }

    #[test]
    fn uniform_translation_on_periodic_line() {
        let spec = periodic_line(64);
        let period = spec.axis(0).period();
        let rho = GridField::scalar_from_fn(&spec, 0.0, |x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0] / period).sin());
        let speed = GridField::scalar_from_fn(&spec, 0.0, |_| 0.3);
        let h = spec.axis(0).spacing();
        let dt = 0.5 * h / 0.3;
        let m0 = rho.integral(0);
        let mut r = rho.clone();
        for _ in 0..1000 {
            r = conservative_step(&speed, &r, dt).unwrap().0;
        }
        assert!((r.integral(0) - m0).abs() < 1e-12);
    }

    #[test]
    fn zero_speed_keeps_density() {
        let spec = GridSpec::line(-1.0, 1.0, 11).unwrap();
        let rho = GridField::scalar_from_fn(&spec, 0.0, |x| (-x[0] * x[0]).exp());
        let speed = GridField::zeros(&spec, 1, 0.0);
        let (next, rep) = conservative_step(&speed, &rho, 0.1).unwrap();
        assert_eq!(next.values, rho.values);
        assert_eq!(rep.boundary_outflow, 0.0);
    }

    #[test]
    fn outflow_mass_balance() {
        let spec = GridSpec::line(0.0, 1.0, 21).unwrap();
        let rho = GridField::scalar_from_fn(&spec, 0.0, |_| 1.0);
        let speed = GridField::scalar_from_fn(&spec, 0.0, |_| 1.0);
        let (next, rep) = conservative_step(&speed, &rho, 0.01).unwrap();
        let lost = rho.integral(0) - next.integral(0);
        assert!((lost - rep.boundary_outflow).abs() < 1e-15);
        assert!(rep.boundary_outflow > 0.0);
    }

    #[test]
    fn cfl_violation_names_node() {
        let spec = GridSpec::line(0.0, 1.0, 11).unwrap();
        let rho = GridField::scalar_from_fn(&spec, 0.0, |_| 1.0);
        let speed = GridField::scalar_from_fn(&spec, 0.0, |x| 10.0 * x[0]);
        match conservative_step(&speed, &rho, 0.01).unwrap_err() {
            Error::Cfl { node, .. } => assert_eq!(node, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semi_lagrangian_translation_and_source() {
        let spec = periodic_line(50);
        let period = spec.axis(0).period();
        let w = 2.0 * std::f64::consts::PI / period;
        let u0 = GridField::scalar_from_fn(&spec, 0.0, |x| (w * x[0]).sin());
        let speed = |_: f64, _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.2;
        let source = |_: f64, _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 1.0;
        let dt = 0.04;
        let (u1, rep) = semi_lagrangian_step(&u0, &speed, &source, dt).unwrap();
        assert!(rep.extrapolated.is_empty());
        for node in 0..spec.node_count() {
            let x = spec.coords(node)[0];
            let exact = (w * (x - 0.2 * dt)).sin() + dt;
            assert!((u1.get(0, node) - exact).abs() < 1e-5);
        }
    }

    #[test]
    fn outflow_feet_are_flagged() {
        let spec = GridSpec::line(0.0, 1.0, 11).unwrap();
        let u0 = GridField::scalar_from_fn(&spec, 0.0, |x| x[0]);
        let speed = |_: f64, _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 1.0;
        let zero = |_: f64, _: &[f64], _: &[f64], out: &mut [f64]| out[0] = 0.0;
        let (u1, rep) = semi_lagrangian_step(&u0, &speed, &zero, 0.05).unwrap();
        assert_eq!(rep.extrapolated, vec![0]);
        // linear data extrapolates exactly
        assert!((u1.get(0, 0) + 0.05).abs() < 1e-12);
    }
}
