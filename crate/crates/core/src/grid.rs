//! Rectilinear grids over configuration or momentum space and the fields
//! sampled on them.

use crate::error::{Error, Result};

/// Largest grid dimension supported by the fixed-size stencil buffers.
pub const MAX_GRID_DIMS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Node `n - 1` is followed by node `0`; the period is `n * h`.
    Periodic,
    /// Values beyond the last node are filled by one-sided extrapolation
    /// (fields) or zero inflow (densities).
    Outflow,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "periodic" => Ok(Boundary::Periodic),
            "outflow" => Ok(Boundary::Outflow),
            other => Err(Error::config(format!("unknown boundary `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
    pub boundary: Boundary,
}

impl Axis {
    pub fn new(min: f64, max: f64, nodes: usize, boundary: Boundary) -> Self {
        Axis {
            min,
            max,
            nodes,
            boundary,
        }
    }

    pub fn outflow(min: f64, max: f64, nodes: usize) -> Self {
        Self::new(min, max, nodes, Boundary::Outflow)
    }

    pub fn periodic(min: f64, max: f64, nodes: usize) -> Self {
        Self::new(min, max, nodes, Boundary::Periodic)
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.nodes - 1) as f64
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        self.min + i as f64 * self.spacing()
    }

    pub fn period(&self) -> f64 {
        self.nodes as f64 * self.spacing()
    }
}

/// Axis-aligned uniform grid; nodes are stored in row-major order with the
/// last axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    axes: Vec<Axis>,
    strides: Vec<usize>,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_GRID_DIMS {
            return Err(Error::config(format!(
                "grid dimension must be in 1..={MAX_GRID_DIMS}, got {}",
                axes.len()
            )));
        }
        for (k, a) in axes.iter().enumerate() {
            if a.nodes < 3 {
                return Err(Error::config(format!(
                    "axis {} has {} nodes; at least 3 are required",
                    k + 1,
                    a.nodes
                )));
            }
            if !(a.max > a.min) || !a.min.is_finite() || !a.max.is_finite() {
                return Err(Error::config(format!(
                    "axis {} bounds [{}, {}] are not increasing",
                    k + 1,
                    a.min,
                    a.max
                )));
            }
        }
        let mut strides = vec![1; axes.len()];
        for k in (0..axes.len() - 1).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].nodes;
        }
        Ok(GridSpec { axes, strides })
    }

    /// One-dimensional outflow grid.
    pub fn line(min: f64, max: f64, nodes: usize) -> Result<Self> {
        Self::new(vec![Axis::outflow(min, max, nodes)])
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &Axis {
        &self.axes[k]
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    pub fn stride(&self, k: usize) -> usize {
        self.strides[k]
    }

    pub fn min_spacing(&self) -> f64 {
        self.axes
            .iter()
            .map(Axis::spacing)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    /// Index along axis `k` of flat node `node`.
    #[inline]
    pub fn axis_index(&self, node: usize, k: usize) -> usize {
        (node / self.strides[k]) % self.axes[k].nodes
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        (0..self.dims()).map(|k| self.axis_index(node, k)).collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    #[inline]
    pub fn coords_into(&self, node: usize, out: &mut [f64]) {
        for (k, a) in self.axes.iter().enumerate() {
            out[k] = a.coord(self.axis_index(node, k));
        }
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dims()];
        self.coords_into(node, &mut c);
        c
    }

    /// Neighbor of `node` offset by `delta` along axis `k`, wrapping on
    /// periodic axes; `None` past an outflow boundary.
    #[inline]
    pub fn neighbor(&self, node: usize, k: usize, delta: isize) -> Option<usize> {
        let a = &self.axes[k];
        let i = self.axis_index(node, k) as isize;
        let n = a.nodes as isize;
        let j = i + delta;
        let j = match a.boundary {
            Boundary::Periodic => j.rem_euclid(n),
            Boundary::Outflow if (0..n).contains(&j) => j,
            Boundary::Outflow => return None,
        };
        Some((node as isize + (j - i) * self.strides[k] as isize) as usize)
    }

    /// True when every axis has a neighbor on both sides of `node`.
    pub fn is_interior(&self, node: usize) -> bool {
        (0..self.dims()).all(|k| {
            self.neighbor(node, k, -1).is_some() && self.neighbor(node, k, 1).is_some()
        })
    }

    /// True when the node sits at least `margin` nodes from every outflow
    /// boundary.
    pub fn is_inside(&self, node: usize, margin: usize) -> bool {
        self.axes.iter().enumerate().all(|(k, a)| {
            a.boundary == Boundary::Periodic || {
                let i = self.axis_index(node, k);
                i >= margin && i + margin < a.nodes
            }
        })
    }

    /// Maps a point onto the fundamental domain of periodic axes.
    pub fn wrap_point(&self, x: &mut [f64]) {
        for (k, a) in self.axes.iter().enumerate() {
            if a.boundary == Boundary::Periodic {
                let l = a.period();
                x[k] = a.min + (x[k] - a.min).rem_euclid(l);
            }
        }
    }

    /// True when the point lies within the closed box of an outflow grid
    /// (periodic axes always contain the point).
    pub fn contains(&self, x: &[f64]) -> bool {
        self.axes.iter().zip(x).all(|(a, &v)| {
            a.boundary == Boundary::Periodic || (v >= a.min - 1e-12 * a.spacing() && v <= a.max + 1e-12 * a.spacing())
        })
    }
}

/// Which space the grid axes span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axes {
    Q,
    P,
}

impl Axes {
    pub fn tag(self) -> &'static str {
        match self {
            Axes::Q => "q",
            Axes::P => "p",
        }
    }
}

/// Scalar or vector quantity sampled on a [`GridSpec`].
///
/// Values are component-major: component `c` of node `i` lives at
/// `values[c * node_count + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub spec: GridSpec,
    pub axes: Axes,
    pub components: usize,
    pub values: Vec<f64>,
    pub t: f64,
    /// Nodes explicitly flagged as carrying no meaningful value.
    pub invalid: Option<Vec<bool>>,
}

impl GridField {
    pub fn zeros(spec: &GridSpec, components: usize, t: f64) -> Self {
        GridField {
            values: vec![0.0; components * spec.node_count()],
            spec: spec.clone(),
            axes: Axes::Q,
            components,
            t,
            invalid: None,
        }
    }

    /// Samples `f(coords, out)` at every node.
    pub fn from_fn(
        spec: &GridSpec,
        components: usize,
        t: f64,
        mut f: impl FnMut(&[f64], &mut [f64]),
    ) -> Self {
        let mut field = Self::zeros(spec, components, t);
        let n = spec.node_count();
        let mut x = vec![0.0; spec.dims()];
        let mut out = vec![0.0; components];
        for node in 0..n {
            spec.coords_into(node, &mut x);
            f(&x, &mut out);
            for c in 0..components {
                field.values[c * n + node] = out[c];
            }
        }
        field
    }

    pub fn scalar_from_fn(spec: &GridSpec, t: f64, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        Self::from_fn(spec, 1, t, |x, out| out[0] = f(x))
    }

    pub fn try_from_fn(
        spec: &GridSpec,
        components: usize,
        t: f64,
        mut f: impl FnMut(&[f64], &mut [f64]) -> Result<()>,
    ) -> Result<Self> {
        let mut err = None;
        let field = Self::from_fn(spec, components, t, |x, out| {
            if err.is_none() {
                if let Err(e) = f(x, out) {
                    err = Some(e);
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(field),
        }
    }

    pub fn with_axes(mut self, axes: Axes) -> Self {
        self.axes = axes;
        self
    }

    pub fn node_count(&self) -> usize {
        self.spec.node_count()
    }

    pub fn dims(&self) -> usize {
        self.spec.dims()
    }

    #[inline]
    pub fn get(&self, c: usize, node: usize) -> f64 {
        self.values[c * self.spec.node_count() + node]
    }

    #[inline]
    pub fn set(&mut self, c: usize, node: usize, v: f64) {
        let n = self.spec.node_count();
        self.values[c * n + node] = v;
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.spec.node_count();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spec.node_count();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn vector_at(&self, node: usize, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate().take(self.components) {
            *o = self.get(c, node);
        }
    }

    pub fn is_valid(&self, node: usize) -> bool {
        self.invalid.as_ref().map_or(true, |m| !m[node])
    }

    /// Sum of all values of component `c` times the cell volume.
    pub fn integral(&self, c: usize) -> f64 {
        self.component(c).iter().sum::<f64>() * self.spec.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Central-difference derivative of component `c` along axis `k` at a
    /// node with neighbors on both sides.
    pub fn central_diff(&self, c: usize, node: usize, k: usize) -> Result<f64> {
        let (Some(lo), Some(hi)) = (self.spec.neighbor(node, k, -1), self.spec.neighbor(node, k, 1))
        else {
            return Err(Error::OutOfStencil(format!(
                "node {node} has no central stencil along axis {}",
                k + 1
            )));
        };
        Ok((self.get(c, hi) - self.get(c, lo)) / (2.0 * self.spec.axis(k).spacing()))
    }

    /// Derivative along axis `k` at every node: central in the interior,
    /// second-order one-sided next to outflow boundaries.
    pub fn derivative(&self, c: usize, k: usize) -> Vec<f64> {
        let n = self.spec.node_count();
        let h = self.spec.axis(k).spacing();
        (0..n)
            .map(|node| {
                match (self.spec.neighbor(node, k, -1), self.spec.neighbor(node, k, 1)) {
                    (Some(lo), Some(hi)) => (self.get(c, hi) - self.get(c, lo)) / (2.0 * h),
                    (None, Some(hi)) => {
                        let hi2 = self.spec.neighbor(node, k, 2).unwrap_or(hi);
                        (-3.0 * self.get(c, node) + 4.0 * self.get(c, hi) - self.get(c, hi2))
                            / (2.0 * h)
                    }
                    (Some(lo), None) => {
                        let lo2 = self.spec.neighbor(node, k, -2).unwrap_or(lo);
                        (3.0 * self.get(c, node) - 4.0 * self.get(c, lo) + self.get(c, lo2))
                            / (2.0 * h)
                    }
                    (None, None) => 0.0,
                }
            })
            .collect()
    }

    /// Gradient of scalar component `c` as an `s`-component field.
    pub fn gradient(&self, c: usize) -> GridField {
        let s = self.dims();
        let mut g = GridField::zeros(&self.spec, s, self.t).with_axes(self.axes);
        for k in 0..s {
            let d = self.derivative(c, k);
            g.component_mut(k).copy_from_slice(&d);
        }
        g
    }

    /// Tensor-product Lagrange interpolation of component `c` with up to
    /// `order` points per axis (4 = cubic, 2 = linear). The flag reports
    /// whether the point fell outside an outflow boundary.
    pub fn interpolate(&self, c: usize, x: &[f64], order: usize) -> (f64, bool) {
        let mut st = [AxisStencil::default(); MAX_GRID_DIMS];
        let mut outside = false;
        for k in 0..self.dims() {
            st[k] = AxisStencil::new(self.spec.axis(k), x[k], order);
            outside |= st[k].outside;
        }
        (self.combine(c, &st[..self.dims()]), outside)
    }

    pub fn cubic(&self, c: usize, x: &[f64]) -> f64 {
        self.interpolate(c, x, 4).0
    }

    pub fn linear(&self, c: usize, x: &[f64]) -> f64 {
        self.interpolate(c, x, 2).0
    }

    /// Interpolates every component at once, sharing the stencil.
    pub fn interpolate_all(&self, x: &[f64], order: usize, out: &mut [f64]) -> bool {
        let mut st = [AxisStencil::default(); MAX_GRID_DIMS];
        let mut outside = false;
        for k in 0..self.dims() {
            st[k] = AxisStencil::new(self.spec.axis(k), x[k], order);
            outside |= st[k].outside;
        }
        for (c, o) in out.iter_mut().enumerate().take(self.components) {
            *o = self.combine(c, &st[..self.dims()]);
        }
        outside
    }

    fn combine(&self, c: usize, st: &[AxisStencil]) -> f64 {
        let s = st.len();
        let base = c * self.spec.node_count();
        let mut counter = [0usize; MAX_GRID_DIMS];
        let mut acc = 0.0;
        loop {
            let mut w = 1.0;
            let mut idx = 0;
            for k in 0..s {
                w *= st[k].w[counter[k]];
                idx += st[k].idx[counter[k]] * self.spec.strides[k];
            }
            acc += w * self.values[base + idx];
            // odometer increment
            let mut k = s;
            loop {
                if k == 0 {
                    return acc;
                }
                k -= 1;
                counter[k] += 1;
                if counter[k] < st[k].len {
                    break;
                }
                counter[k] = 0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct AxisStencil {
    idx: [usize; 4],
    w: [f64; 4],
    len: usize,
    outside: bool,
}

impl AxisStencil {
    fn new(axis: &Axis, x: f64, order: usize) -> Self {
        let n = axis.nodes;
        let h = axis.spacing();
        let len = order.min(n).max(1);
        let mut s = (x - axis.min) / h;
        let mut outside = false;
        if axis.boundary == Boundary::Periodic {
            s = s.rem_euclid(n as f64);
        } else if s < 0.0 || s > (n - 1) as f64 {
            outside = true;
        }
        // first stencil node; centered for even lengths
        let lead = (len as isize - 1) / 2;
        let mut first = s.floor() as isize - lead;
        if axis.boundary == Boundary::Outflow {
            first = first.clamp(0, n as isize - len as isize);
        }
        let mut st = AxisStencil {
            idx: [0; 4],
            w: [0.0; 4],
            len,
            outside,
        };
        let u = s - first as f64;
        for j in 0..len {
            st.idx[j] = (first + j as isize).rem_euclid(n as isize) as usize;
            let mut w = 1.0;
            for m in 0..len {
                if m != j {
                    w *= (u - m as f64) / (j as f64 - m as f64);
                }
            }
            st.w[j] = w;
        }
        st
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_axes() {
        assert!(GridSpec::line(0.0, 1.0, 2).is_err());
        assert!(GridSpec::line(1.0, 1.0, 5).is_err());
        assert!(GridSpec::new(vec![]).is_err());
    }

    #[test]
    fn row_major_layout() {
        let g = GridSpec::new(vec![Axis::outflow(0.0, 1.0, 3), Axis::outflow(0.0, 2.0, 5)]).unwrap();
        assert_eq!(g.node_count(), 15);
        assert_eq!(g.stride(0), 5);
        assert_eq!(g.multi_index(7), vec![1, 2]);
        assert_eq!(g.flat_index(&[2, 4]), 14);
        assert_eq!(g.coords(7), vec![0.5, 1.0]);
        assert_eq!(g.neighbor(7, 1, 1), Some(8));
        assert_eq!(g.neighbor(4, 1, 1), None);
    }

    #[test]
    fn periodic_neighbors_wrap() {
        let g = GridSpec::new(vec![Axis::periodic(0.0, 0.75, 4)]).unwrap();
        assert_eq!(g.neighbor(0, 0, -1), Some(3));
        assert_eq!(g.neighbor(3, 0, 1), Some(0));
        assert!((g.axis(0).period() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cubic_reproduces_cubics_and_extrapolates() {
        let g = GridSpec::line(-1.0, 1.0, 11).unwrap();
        let f = GridField::scalar_from_fn(&g, 0.0, |x| x[0].powi(3) - 2.0 * x[0]);
        for &x in &[-0.93, -0.31, 0.0, 0.47, 0.99] {
            let exact: f64 = x * x * x - 2.0 * x;
            assert!((f.cubic(0, &[x]) - exact).abs() < 1e-13);
        }
        let (v, outside) = f.interpolate(0, &[1.05], 4);
        assert!(outside);
        assert!((v - (1.05f64.powi(3) - 2.1)).abs() < 1e-12);
    }

    #[test]
    fn periodic_interpolation_wraps() {
        let g = GridSpec::new(vec![Axis::periodic(0.0, 2.0 * std::f64::consts::PI * 63.0 / 64.0, 64)]).unwrap();
        let f = GridField::scalar_from_fn(&g, 0.0, |x| x[0].sin());
        let x = 2.0 * std::f64::consts::PI + 0.3;
        assert!((f.cubic(0, &[x]) - 0.3f64.sin()).abs() < 1e-5);
        assert!((f.cubic(0, &[-0.3]) + 0.3f64.sin()).abs() < 1e-5);
    }

    #[test]
    fn bilinear_exact_on_bilinear_fields() {
        let g = GridSpec::new(vec![Axis::outflow(0.0, 1.0, 5), Axis::outflow(0.0, 1.0, 7)]).unwrap();
        let f = GridField::scalar_from_fn(&g, 0.0, |x| 1.0 + 2.0 * x[0] - x[1] + 3.0 * x[0] * x[1]);
        let p = [0.37, 0.61];
        let exact = 1.0 + 2.0 * p[0] - p[1] + 3.0 * p[0] * p[1];
        assert!((f.linear(0, &p) - exact).abs() < 1e-14);
        assert!((f.cubic(0, &p) - exact).abs() < 1e-14);
    }

    #[test]
    fn derivative_is_exact_for_quadratics() {
        let g = GridSpec::line(-1.0, 1.0, 101).unwrap();
        let s = GridField::scalar_from_fn(&g, 0.0, |x| 0.5 * x[0] * x[0]);
        let d = s.derivative(0, 0);
        for node in 0..g.node_count() {
            assert!((d[node] - g.coords(node)[0]).abs() < 1e-12);
        }
        assert!(s.central_diff(0, 0, 0).is_err());
    }
}
