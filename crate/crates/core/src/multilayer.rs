//! Multilayer configuration space: coexisting single-valued branches of an
//! ensemble, the turning surfaces where they glue, and classical mixing.
//!
//! Turning surfaces are found from sign changes of velocity components, which
//! covers the case where velocity vanishes there. A velocity that is merely
//! tangent to the surface (nonzero along it) is not exercised by any test.

use crate::error::{Error, Result};
use crate::grid::{GridField, GridSpec};
use crate::lagrangian::{PhaseState, Trajectory};
use crate::model::SystemModel;

/// Allowed deviation of the weight sum from one.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

/// One partial ensemble: density and velocity on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub index: usize,
    pub rho: GridField,
    pub velocity: GridField,
}

impl Layer {
    pub fn new(index: usize, rho: GridField, velocity: GridField) -> Result<Self> {
        if rho.components != 1 || velocity.components != rho.dims() || velocity.spec != rho.spec {
            return Err(Error::contract(
                "a layer needs a scalar density and a velocity field on the same grid",
            ));
        }
        if rho.t != velocity.t {
            return Err(Error::contract("layer density and velocity must share one time"));
        }
        if let Some(node) = (0..rho.node_count()).find(|&i| rho.is_valid(i) && rho.get(0, i) < 0.0) {
            return Err(Error::contract(format!("layer density is negative at node {node}")));
        }
        Ok(Layer { index, rho, velocity })
    }

    /// Builds the velocity from an action through the model's velocity map.
    pub fn from_action(index: usize, rho: GridField, s: &GridField, model: &SystemModel) -> Result<Self> {
        let p = crate::hj::momentum_from_action(s);
        let v = crate::eulerian::velocity_from_momentum(model, &p, s.t)?;
        Layer::new(index, rho, v)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.rho.spec
    }

    /// Flux density `ρ v` as a vector field.
    pub fn flux(&self) -> GridField {
        let mut j = self.velocity.clone();
        let n = self.rho.node_count();
        for c in 0..j.components {
            for node in 0..n {
                j.values[c * n + node] *= self.rho.get(0, node);
            }
        }
        j.invalid = self.rho.invalid.clone();
        j
    }
}

fn check_weights(layers: &[Layer], weights: &[f64]) -> Result<()> {
    if layers.is_empty() || layers.len() != weights.len() {
        return Err(Error::contract("one weight per layer is required"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::contract("layer weights must be non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(Error::contract(format!("layer weights sum to {sum}, not 1")));
    }
    let first = &layers[0];
    if layers.iter().any(|l| l.spec() != first.spec() || l.rho.t != first.rho.t) {
        return Err(Error::contract("layers must share one grid and time"));
    }
    Ok(())
}

/// Layers with user-supplied mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSet {
    pub layers: Vec<Layer>,
    pub weights: Vec<f64>,
}

impl LayerSet {
    pub fn new(layers: Vec<Layer>, weights: Vec<f64>) -> Result<Self> {
        check_weights(&layers, &weights)?;
        Ok(LayerSet { layers, weights })
    }

    pub fn mixed_density(&self) -> Result<GridField> {
        mix_density(&self.layers, &self.weights)
    }

    pub fn total_flux(&self) -> Result<GridField> {
        total_flux(&self.layers, &self.weights)
    }
}

fn merge_invalid(target: &mut GridField, source: &GridField) {
    if let Some(src) = &source.invalid {
        let dst = target.invalid.get_or_insert_with(|| vec![false; src.len()]);
        for (d, s) in dst.iter_mut().zip(src) {
            *d |= *s;
        }
    }
}

/// `ρ = Σ w_n ρ⁽ⁿ⁾`
pub fn mix_density(layers: &[Layer], weights: &[f64]) -> Result<GridField> {
    check_weights(layers, weights)?;
    let mut out = GridField::zeros(layers[0].spec(), 1, layers[0].rho.t).with_axes(layers[0].rho.axes);
    for (layer, w) in layers.iter().zip(weights) {
        for (o, r) in out.values.iter_mut().zip(&layer.rho.values) {
            *o += w * r;
        }
        merge_invalid(&mut out, &layer.rho);
    }
    Ok(out)
}

/// `j = Σ w_n ρ⁽ⁿ⁾ v⁽ⁿ⁾`
pub fn total_flux(layers: &[Layer], weights: &[f64]) -> Result<GridField> {
    check_weights(layers, weights)?;
    let first = &layers[0];
    let mut out = GridField::zeros(first.spec(), first.velocity.components, first.rho.t).with_axes(first.rho.axes);
    for (layer, w) in layers.iter().zip(weights) {
        let j = layer.flux();
        for (o, v) in out.values.iter_mut().zip(&j.values) {
            *o += w * v;
        }
        merge_invalid(&mut out, &layer.rho);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Turning surfaces

/// One grid cell crossed by a turning surface.
#[derive(Debug, Clone, PartialEq)]
pub struct TurningCell {
    /// Lower node of the cell and the axis it spans.
    pub node: usize,
    pub axis: usize,
    /// Velocity component that vanishes.
    pub component: usize,
    /// Sub-cell position of the zero.
    pub location: Vec<f64>,
    /// Unit normal pointing away from the flow, toward decreasing `|v_c|`.
    pub normal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TurningSurface {
    pub cells: Vec<TurningCell>,
    /// Layer pair glued along this surface, when known.
    pub layers: Option<(usize, usize)>,
}

impl TurningSurface {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn with_layers(mut self, n: usize, k: usize) -> Self {
        self.layers = Some((n, k));
        self
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Cells where a velocity component changes sign (a zero at a node counts
/// as a change), located by linear interpolation.
pub fn detect_turning_surface(layer: &Layer) -> TurningSurface {
    let v = &layer.velocity;
    let spec = v.spec.clone();
    let s = spec.dims();
    let n = spec.node_count();
    let derivs: Vec<Vec<Vec<f64>>> = (0..v.components).map(|c| (0..s).map(|k| v.derivative(c, k)).collect()).collect();
    let mut cells = Vec::new();
    for c in 0..v.components {
        for k in 0..s {
            for node in 0..n {
                let Some(next) = spec.neighbor(node, k, 1) else {
                    continue;
                };
                let (a, b) = (v.get(c, node), v.get(c, next));
                if sign(a) == sign(b) {
                    continue;
                }
                let frac = if a == b { 0.0 } else { (a / (a - b)).clamp(0.0, 1.0) };
                let mut location = spec.coords(node);
                location[k] += frac * spec.axis(k).spacing();
                // interior side decides which way is outward
                let inside = if a != 0.0 { a } else { b };
                let mut normal: Vec<f64> = (0..s)
                    .map(|j| {
                        let g = (1.0 - frac) * derivs[c][j][node] + frac * derivs[c][j][next];
                        -f64::from(sign(inside)) * g
                    })
                    .collect();
                let norm = normal.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    normal.iter_mut().for_each(|x| *x /= norm);
                } else {
                    normal = vec![0.0; s];
                    normal[k] = if a == 0.0 { -1.0 } else { 1.0 };
                }
                cells.push(TurningCell {
                    node,
                    axis: k,
                    component: c,
                    location,
                    normal,
                });
            }
        }
    }
    TurningSurface { cells, layers: None }
}

/// Per-cell normal-flux sums and the overall verdict.
#[derive(Debug, Clone)]
pub struct FluxMatchReport {
    /// `j⊥⁽ⁿ⁾ + j⊥⁽ᵏ⁾` one cell inside each surface cell.
    pub mismatch: Vec<f64>,
    pub max_mismatch: f64,
    /// Largest `|j⊥⁽ᵏ⁾| / |j⊥⁽ⁿ⁾|` over cells with nonzero flux (1 when
    /// matched).
    pub asymmetry: f64,
    pub matched: bool,
}

/// Compares normal fluxes of two layers one cell inside every surface
/// cell. Cells whose sample point touches flagged nodes are skipped.
pub fn check_flux_matching(layer_n: &Layer, layer_k: &Layer, surface: &TurningSurface, tol: f64) -> Result<FluxMatchReport> {
    if layer_n.spec() != layer_k.spec() || layer_n.rho.t != layer_k.rho.t {
        return Err(Error::contract("flux matching needs layers on one grid at one time"));
    }
    let spec = layer_n.spec();
    let (jn, jk) = (layer_n.flux(), layer_k.flux());
    let s = spec.dims();
    let mut mismatch = Vec::with_capacity(surface.cells.len());
    let mut asymmetry: f64 = 1.0;
    let mut jv = vec![0.0; s];
    for cell in &surface.cells {
        let point: Vec<f64> = (0..s)
            .map(|j| cell.location[j] - spec.axis(j).spacing() * cell.normal[j])
            .collect();
        if !spec.contains(&point) || touches_flagged(layer_n, &point) || touches_flagged(layer_k, &point) {
            continue;
        }
        let normal_flux = |j: &GridField, buf: &mut [f64]| {
            j.interpolate_all(&point, 2, buf);
            buf.iter().zip(&cell.normal).map(|(a, b)| a * b).sum::<f64>()
        };
        let a = normal_flux(&jn, &mut jv);
        let b = normal_flux(&jk, &mut jv);
        mismatch.push(a + b);
        if a.abs() > 0.0 && b.abs() > 0.0 {
            asymmetry = asymmetry.max((b / a).abs()).max((a / b).abs());
        }
    }
    let max_mismatch = mismatch.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(FluxMatchReport {
        matched: max_mismatch <= tol,
        mismatch,
        max_mismatch,
        asymmetry,
    })
}

fn touches_flagged(layer: &Layer, point: &[f64]) -> bool {
    let Some(flags) = &layer.rho.invalid else {
        return false;
    };
    let spec = layer.spec();
    let s = spec.dims();
    // nodes of the linear stencil; a point sitting on a node uses that node
    let mut lo = vec![0usize; s];
    let mut hi = vec![0usize; s];
    for k in 0..s {
        let a = spec.axis(k);
        let f = ((point[k] - a.min) / a.spacing()).clamp(0.0, (a.nodes - 1) as f64);
        lo[k] = (f + 1e-9).floor() as usize;
        hi[k] = ((f - 1e-9).ceil().max(0.0) as usize).max(lo[k]).min(a.nodes - 1);
        lo[k] = lo[k].min(hi[k]);
    }
    for corner in 0..(1usize << s) {
        let c: Vec<usize> = (0..s).map(|k| if (corner >> k) & 1 == 1 { hi[k] } else { lo[k] }).collect();
        if flags[spec.flat_index(&c)] {
            return true;
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Oscillator branches

/// Forward and reverse branches of a 1-D oscillator at energy `E`,
/// `v± = ±sqrt(2(E − mω²x²/2)/m)`, `ρ± = ω / (π |v|)`, so the equal-weight
/// mixture integrates to one. Nodes within one cell of the turning points
/// (and beyond them) are flagged; their density is extrapolated from the
/// interior.
pub fn build_oscillator_layers(energy: f64, m: f64, omega: f64, grid: &GridSpec) -> Result<LayerSet> {
    if grid.dims() != 1 {
        return Err(Error::config("oscillator layers need a 1-D grid"));
    }
    if !(energy > 0.0 && m > 0.0 && omega > 0.0) {
        return Err(Error::config("oscillator layers need E, m and ω positive"));
    }
    let amp = (2.0 * energy / (m * omega * omega)).sqrt();
    let axis = grid.axis(0);
    let slack = 1e-12 * amp;
    if axis.min > -amp + slack || axis.max < amp - slack {
        return Err(Error::config(format!(
            "grid [{}, {}] does not cover the allowed interval [-{amp}, {amp}]",
            axis.min, axis.max
        )));
    }
    let h = axis.spacing();
    let n = grid.node_count();
    let c = omega / std::f64::consts::PI;
    let speed = |x: f64| (2.0 * (energy - 0.5 * m * omega * omega * x * x) / m).max(0.0).sqrt();
    let flagged: Vec<bool> = (0..n).map(|i| axis.coord(i).abs() > amp - h * (1.0 - 1e-9)).collect();
    let mut rho = GridField::zeros(grid, 1, 0.0);
    for i in 0..n {
        if !flagged[i] {
            rho.values[i] = c / speed(axis.coord(i));
        }
    }
    // linear extrapolation into the flagged band next to each turning point
    let interior: Vec<usize> = (0..n).filter(|&i| !flagged[i]).collect();
    if interior.len() < 2 {
        return Err(Error::config("grid too coarse to resolve the allowed interval"));
    }
    let (lo, hi) = (interior[0], *interior.last().unwrap());
    for i in 0..n {
        if flagged[i] && axis.coord(i).abs() <= amp {
            let (a, b) = if i < lo { (lo, lo + 1) } else { (hi, hi - 1) };
            let slope = (rho.values[b] - rho.values[a]) / (b as f64 - a as f64);
            rho.values[i] = (rho.values[a] + slope * (i as f64 - a as f64)).max(0.0);
        }
    }
    rho.invalid = Some(flagged);
    let mut layers = Vec::with_capacity(2);
    for (index, dir) in [(0usize, 1.0f64), (1, -1.0)] {
        let v = GridField::scalar_from_fn(grid, 0.0, |x| dir * speed(x[0]));
        layers.push(Layer::new(index, rho.clone(), v)?);
    }
    LayerSet::new(layers, vec![0.5, 0.5])
}

// ---------------------------------------------------------------------------
// Trajectory segments

/// Contiguous part of a trajectory during which no velocity component
/// changes sign.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    /// Sign of each velocity component on the segment (0 when it vanished
    /// at every sample).
    pub signs: Vec<i8>,
    pub samples: Vec<PhaseState>,
}

/// Splits a trajectory at sign changes of any velocity component. The
/// trajectory itself is left untouched.
pub fn split_into_layers(model: &SystemModel, traj: &Trajectory) -> Vec<TrajectorySegment> {
    let s = model.dim();
    let mut v = vec![0.0; s];
    let mut segments: Vec<TrajectorySegment> = Vec::new();
    for st in &traj.samples {
        model.velocity(st.t, &st.q, &st.p, &mut v);
        let signs: Vec<i8> = v.iter().map(|x| sign(*x)).collect();
        let start_new = match segments.last() {
            None => true,
            Some(seg) => seg
                .signs
                .iter()
                .zip(&signs)
                .any(|(a, b)| *a != 0 && *b != 0 && a != b),
        };
        if start_new {
            segments.push(TrajectorySegment {
                signs,
                samples: vec![st.clone()],
            });
        } else {
            let seg = segments.last_mut().expect("non-empty");
            for (a, b) in seg.signs.iter_mut().zip(&signs) {
                if *a == 0 {
                    *a = *b;
                }
            }
            seg.samples.push(st.clone());
        }
    }
    segments
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;
    use crate::lagrangian::{integrate_trajectory, IntegrationOptions};
    use crate::model;
    use std::f64::consts::PI;

    fn line() -> GridSpec {
        GridSpec::line(-1.0, 1.0, 401).unwrap()
    }

    #[test]
    fn uniform_flow_has_no_turning_surface() {
        let spec = line();
        let layer = Layer::new(0, GridField::scalar_from_fn(&spec, 0.0, |_| 1.0), GridField::scalar_from_fn(&spec, 0.0, |_| 1.0)).unwrap();
        assert!(detect_turning_surface(&layer).is_empty());
    }

    #[test]
    fn oscillator_branch_turns_at_amplitude() {
        let set = build_oscillator_layers(0.5, 1.0, 1.0, &line()).unwrap();
        let surf = detect_turning_surface(&set.layers[0]);
        let h = line().axis(0).spacing();
        assert_eq!(surf.cells.len(), 2);
        assert!((surf.cells[0].location[0] + 1.0).abs() <= h);
        assert!((surf.cells[1].location[0] - 1.0).abs() <= h);
        assert_eq!(surf.cells[0].normal, vec![-1.0]);
        assert_eq!(surf.cells[1].normal, vec![1.0]);
    }

    #[test]
    fn planar_turning_surface_for_one_component() {
        let spec = GridSpec::new(vec![Axis::outflow(-1.0, 1.0, 21), Axis::outflow(-1.0, 1.0, 21)]).unwrap();
        let v = GridField::from_fn(&spec, 2, 0.0, |x, out| {
            out[0] = x[0];
            out[1] = 1.0;
        });
        let layer = Layer::new(0, GridField::scalar_from_fn(&spec, 0.0, |_| 1.0), v).unwrap();
        let surf = detect_turning_surface(&layer);
        assert!(!surf.is_empty());
        assert!(surf.cells.iter().all(|c| c.component == 0 && c.location[0].abs() < 1e-12));
    }

    #[test]
    fn oscillator_layers_closed_forms() {
        let set = build_oscillator_layers(0.5, 1.0, 1.0, &line()).unwrap();
        let mixed = set.mixed_density().unwrap();
        let spec = line();
        let mid = spec.node_count() / 2;
        assert!((mixed.get(0, mid) - 1.0 / PI).abs() < 1e-12);
        let at = (0.6f64 + 1.0) / spec.axis(0).spacing();
        let node = at.round() as usize;
        assert!((mixed.get(0, node) - 1.0 / (PI * 0.8)).abs() < 1e-12);
        for layer in &set.layers {
            for i in 0..spec.node_count() {
                if layer.rho.is_valid(i) {
                    assert!((layer.rho.get(0, i) * layer.velocity.get(0, i).abs() - 1.0 / PI).abs() < 1e-12);
                }
            }
        }
        let flux = set.total_flux().unwrap();
        assert!(flux.values.iter().all(|j| j.abs() < 1e-15));
    }

    #[test]
    fn flux_matching_and_negative_control() {
        let set = build_oscillator_layers(0.5, 1.0, 1.0, &line()).unwrap();
        let surf = detect_turning_surface(&set.layers[0]).with_layers(0, 1);
        let (a, b) = (&set.layers[0], &set.layers[1]);
        let rep = check_flux_matching(a, b, &surf, 1e-3).unwrap();
        assert!(rep.matched, "{rep:?}");
        assert!(!rep.mismatch.is_empty());
        let sym = check_flux_matching(b, a, &surf, 1e-3).unwrap();
        assert_eq!(rep.max_mismatch, sym.max_mismatch);

        let mut doubled = b.clone();
        doubled.rho.values.iter_mut().for_each(|r| *r *= 2.0);
        let bad = check_flux_matching(a, &doubled, &surf, 1e-3).unwrap();
        assert!(!bad.matched);
        assert!((bad.asymmetry - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_contracts() {
        let spec = line();
        let rho = GridField::scalar_from_fn(&spec, 0.0, |x| 1.0 + x[0] * x[0]);
        let up = Layer::new(0, rho.clone(), GridField::scalar_from_fn(&spec, 0.0, |_| 2.0)).unwrap();
        let down = Layer::new(1, rho.clone(), GridField::scalar_from_fn(&spec, 0.0, |_| -2.0)).unwrap();
        let layers = vec![up.clone(), down];
        assert_eq!(mix_density(&layers, &[0.5, 0.5]).unwrap().values, rho.values);
        assert!(total_flux(&layers, &[0.5, 0.5]).unwrap().values.iter().all(|j| *j == 0.0));
        assert_eq!(mix_density(&[up.clone()], &[1.0]).unwrap().values, rho.values);
        assert!(matches!(mix_density(&layers, &[0.5, 0.6]), Err(Error::Contract(_))));
        assert!(LayerSet::new(vec![up], vec![0.9]).is_err());
    }

    #[test]
    fn grid_must_cover_allowed_interval() {
        let narrow = GridSpec::line(-0.5, 1.0, 11).unwrap();
        assert!(matches!(build_oscillator_layers(0.5, 1.0, 1.0, &narrow), Err(Error::Config(_))));
    }

    #[test]
    fn trajectory_segments_split_at_turning_points() {
        let ho = model::harmonic_oscillator(1, 1.0, 1.0).unwrap();
        let tr = integrate_trajectory(&ho, &PhaseState::new(0.0, vec![0.0], vec![1.0]), &IntegrationOptions::rk4(0.01, 2.0 * PI)).unwrap();
        let segs = split_into_layers(&ho, &tr);
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[0].signs, vec![1]);
        assert_eq!(segs[1].signs, vec![-1]);
        assert_eq!(segs.iter().map(|s| s.samples.len()).sum::<usize>(), tr.samples.len());
    }
}
