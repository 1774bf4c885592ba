//! `hjfield` snapshots: a four-line header followed by one CSV row per node
//! (coordinates, then field values) in row-major node order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Axes, Axis, GridField, GridSpec};

use super::{fmt_float, read_text, write_text};

const MAGIC: &str = "# hjfield v1";

/// Named columns sampled on one grid at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub spec: GridSpec,
    pub axes: Axes,
    pub t: f64,
    pub names: Vec<String>,
    /// One column per name, in node order.
    pub columns: Vec<Vec<f64>>,
}

impl Snapshot {
    pub fn new(spec: &GridSpec, axes: Axes, t: f64) -> Self {
        Snapshot {
            spec: spec.clone(),
            axes,
            t,
            names: Vec::new(),
            columns: Vec::new(),
        }
    }

    /// Snapshot of every component of `field`, one name per component.
    pub fn from_field(field: &GridField, names: &[&str]) -> Result<Self> {
        let mut snap = Snapshot::new(&field.spec, field.axes, field.t);
        snap.push_field(field, names)?;
        Ok(snap)
    }

    pub fn push(&mut self, name: impl Into<String>, column: Vec<f64>) -> Result<()> {
        let name = name.into();
        if column.len() != self.spec.node_count() {
            return Err(Error::contract(format!(
                "column `{name}` has {} values for {} nodes",
                column.len(),
                self.spec.node_count()
            )));
        }
        if name.is_empty() || name.contains([',', ' ', '\n']) || self.names.contains(&name) {
            return Err(Error::contract(format!("invalid or duplicate column name `{name}`")));
        }
        self.names.push(name);
        self.columns.push(column);
        Ok(())
    }

    pub fn push_field(&mut self, field: &GridField, names: &[&str]) -> Result<()> {
        if field.spec != self.spec || names.len() != field.components {
            return Err(Error::contract(format!(
                "field with {} components needs as many names on the snapshot grid (got {})",
                field.components,
                names.len()
            )));
        }
        for (c, name) in names.iter().enumerate() {
            let mut col = field.component(c).to_vec();
            if let Some(flags) = &field.invalid {
                for (v, &bad) in col.iter_mut().zip(flags) {
                    if bad {
                        *v = f64::NAN;
                    }
                }
            }
            self.push(*name, col)?;
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    /// Gathers the named columns into one field. NaN entries become invalid
    /// nodes.
    pub fn field(&self, names: &[&str]) -> Result<GridField> {
        let mut out = GridField::zeros(&self.spec, names.len(), self.t).with_axes(self.axes);
        let mut invalid = vec![false; self.spec.node_count()];
        for (c, name) in names.iter().enumerate() {
            let col = self
                .column(name)
                .ok_or_else(|| Error::config(format!("snapshot has no column `{name}`")))?;
            for (i, &v) in col.iter().enumerate() {
                invalid[i] |= v.is_nan();
            }
            out.component_mut(c).copy_from_slice(col);
        }
        if invalid.iter().any(|&b| b) {
            out.invalid = Some(invalid);
        }
        Ok(out)
    }

    pub fn render(&self) -> String {
        let spec = &self.spec;
        let dims = spec.dims();
        let mut s = String::with_capacity(spec.node_count() * (dims + self.names.len()) * 24 + 128);
        let grid: Vec<String> = spec.axes().iter().map(|a| a.nodes.to_string()).collect();
        let bounds: Vec<String> = spec
            .axes()
            .iter()
            .map(|a| format!("{}:{}", fmt_float(a.min), fmt_float(a.max)))
            .collect();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(
            s,
            "# axes={} dims={} grid={} t={}",
            self.axes.tag(),
            dims,
            grid.join("x"),
            fmt_float(self.t)
        );
        let _ = writeln!(s, "# bounds={}", bounds.join(","));
        let _ = writeln!(s, "# fields={}", self.names.join(","));
        let mut x = vec![0.0; dims];
        for node in 0..spec.node_count() {
            spec.coords_into(node, &mut x);
            let mut first = true;
            for v in x.iter().chain(self.columns.iter().map(|c| &c[node])) {
                if !first {
                    s.push(',');
                }
                first = false;
                s.push_str(&fmt_float(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut header = |what: &str| -> Result<(usize, &str)> {
            lines
                .next()
                .ok_or_else(|| err(0, format!("file ends before the {what} header line")))
        };

        let (n, l) = header("version")?;
        if l.trim_end() != MAGIC {
            let msg = match l.strip_prefix("# hjfield ") {
                Some(v) => format!("unsupported hjfield version `{}` (expected v1)", v.trim()),
                None => format!("not an hjfield file: `{l}`"),
            };
            return Err(err(n, msg));
        }

        let (n, l) = header("axes")?;
        let kv = key_values(l, n, &err)?;
        let axes = match lookup(&kv, "axes", n, &err)? {
            "q" => Axes::Q,
            "p" => Axes::P,
            other => return Err(err(n, format!("axes must be q or p, got `{other}`"))),
        };
        let dims: usize = parse_num(lookup(&kv, "dims", n, &err)?, "dims", n, &err)?;
        let nodes: Vec<usize> = lookup(&kv, "grid", n, &err)?
            .split('x')
            .map(|v| parse_num(v, "grid", n, &err))
            .collect::<Result<_>>()?;
        let t: f64 = parse_num(lookup(&kv, "t", n, &err)?, "t", n, &err)?;
        if dims == 0 || nodes.len() != dims {
            return Err(err(n, format!("dims={dims} but grid lists {} axes", nodes.len())));
        }

        let (n, l) = header("bounds")?;
        let rest = l
            .strip_prefix("# bounds=")
            .ok_or_else(|| err(n, format!("expected `# bounds=`, got `{l}`")))?;
        let bounds: Vec<(f64, f64)> = rest
            .split(',')
            .map(|b| {
                let (lo, hi) = b
                    .split_once(':')
                    .ok_or_else(|| err(n, format!("bound `{b}` is not min:max")))?;
                Ok((parse_num(lo, "bounds", n, &err)?, parse_num(hi, "bounds", n, &err)?))
            })
            .collect::<Result<_>>()?;
        if bounds.len() != dims {
            return Err(err(n, format!("{} bounds for {dims} dimensions", bounds.len())));
        }
        let spec = GridSpec::new(
            bounds
                .iter()
                .zip(&nodes)
                .map(|(&(lo, hi), &k)| Axis::outflow(lo, hi, k))
                .collect(),
        )
        .map_err(|e| err(n, e.to_string()))?;

        let (n, l) = header("fields")?;
        let rest = l
            .strip_prefix("# fields=")
            .ok_or_else(|| err(n, format!("expected `# fields=`, got `{l}`")))?;
        let names: Vec<String> = if rest.trim().is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(|s| s.trim().to_string()).collect()
        };

        let count = spec.node_count();
        let width = dims + names.len();
        let mut columns = vec![Vec::with_capacity(count); names.len()];
        let mut x = vec![0.0; dims];
        let mut node = 0;
        for (n, l) in lines {
            if l.trim().is_empty() {
                continue;
            }
            if node == count {
                return Err(err(n, format!("more data rows than the {count} grid nodes")));
            }
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != width {
                return Err(err(n, format!("expected {width} values, found {}", cells.len())));
            }
            spec.coords_into(node, &mut x);
            for (k, cell) in cells.iter().enumerate() {
                let v: f64 = parse_num(cell, "value", n, &err)?;
                if k < dims {
                    let tol = 1e-9 * spec.axis(k).spacing().abs().max(1e-300);
                    if (v - x[k]).abs() > tol {
                        return Err(err(n, format!("coordinate {v} does not match grid node {node} (expected {})", x[k])));
                    }
                } else {
                    columns[k - dims].push(v);
                }
            }
            node += 1;
        }
        if node != count {
            return Err(err(0, format!("found {node} data rows for {count} grid nodes")));
        }
        Ok(Snapshot {
            spec,
            axes,
            t,
            names,
            columns,
        })
    }
}

fn key_values<'a>(line: &'a str, n: usize, err: &impl Fn(usize, String) -> Error) -> Result<Vec<(&'a str, &'a str)>> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| err(n, format!("malformed header `{line}`")))?;
    body.split_whitespace()
        .map(|kv| kv.split_once('=').ok_or_else(|| err(n, format!("malformed header entry `{kv}`"))))
        .collect()
}

fn lookup<'a>(kv: &[(&str, &'a str)], key: &str, n: usize, err: &impl Fn(usize, String) -> Error) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| err(n, format!("header is missing `{key}=`")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, n: usize, err: &impl Fn(usize, String) -> Error) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| err(n, format!("cannot read {what} from `{}`", s.trim())))
}

pub fn write_snapshot(path: &Path, snap: &Snapshot) -> Result<()> {
    write_text(path, &snap.render())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    Snapshot::parse(&read_text(path)?, path)
}

/// Writes `field` with one column per component.
pub fn write_field_snapshot(path: &Path, field: &GridField, names: &[&str]) -> Result<()> {
    write_snapshot(path, &Snapshot::from_field(field, names)?)
}

/// Reads every column of a snapshot as one multi-component field.
pub fn read_field_snapshot(path: &Path) -> Result<(GridField, Vec<String>)> {
    let snap = read_snapshot(path)?;
    let names: Vec<&str> = snap.names.iter().map(String::as_str).collect();
    let field = snap.field(&names)?;
    Ok((field, snap.names.clone()))
}

/// `<dir>/<stem>_<index>.hjfield`
pub fn snapshot_path(dir: &Path, stem: &str, index: usize) -> PathBuf {
    dir.join(format!("{stem}_{index:04}.hjfield"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_node_line() {
        let spec = GridSpec::line(0.0, 1.0, 3).unwrap();
        let f = GridField::scalar_from_fn(&spec, 0.0, |x| x[0]);
        let text = Snapshot::from_field(&f, &["S"]).unwrap().render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# hjfield v1");
        assert!(lines[1].starts_with("# axes=q dims=1 grid=3 t="));
        assert_eq!(lines[3], "# fields=S");
        let rows: Vec<(f64, f64)> = lines[4..]
            .iter()
            .map(|l| {
                let (a, b) = l.split_once(',').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect();
        assert_eq!(rows, vec![(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]);
    }

    #[test]
    fn version_mismatch_names_the_line() {
        let spec = GridSpec::line(0.0, 1.0, 3).unwrap();
        let f = GridField::zeros(&spec, 1, 0.0);
        let text = Snapshot::from_field(&f, &["S"]).unwrap().render().replace("v1", "v2");
        let e = Snapshot::parse(&text, Path::new("a.hjfield")).unwrap_err();
        assert!(matches!(e, Error::Format { line: 1, .. }), "{e}");
        assert!(e.to_string().contains("v2"));
    }

    #[test]
    fn row_count_mismatch() {
        let spec = GridSpec::line(0.0, 1.0, 3).unwrap();
        let f = GridField::zeros(&spec, 1, 0.0);
        let text = Snapshot::from_field(&f, &["S"]).unwrap().render();
        let short: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(Snapshot::parse(&short, Path::new("a")).is_err());
        let bad = text.replacen("# grid=", "# grid=", 1).replace("dims=1", "dims=2");
        let e = Snapshot::parse(&bad, Path::new("a")).unwrap_err();
        assert!(matches!(e, Error::Format { line: 2, .. }));
    }
}
