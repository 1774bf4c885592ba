//! Manifests tying several snapshot files into one object: a layer set (one
//! snapshot per layer plus the weights) or a dipole field set (one snapshot
//! per field).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dipole::DipoleFieldSet;
use crate::error::{Error, Result};
use crate::multilayer::{Layer, LayerSet};

use super::snapshot::{read_snapshot, write_snapshot, Snapshot};
use super::{fmt_float, read_text, write_text};

const LAYERS_MAGIC: &str = "# hjlayers v1";
const DIPOLE_MAGIC: &str = "# hjdipole v1";

fn velocity_names(dims: usize) -> Vec<String> {
    (1..=dims).map(|k| format!("v{k}")).collect()
}

/// Writes `<dir>/<stem>.manifest` and one `<stem>_<n>.hjfield` per layer
/// holding `rho, v1..vs`.
pub fn write_layer_set(dir: &Path, stem: &str, set: &LayerSet) -> Result<PathBuf> {
    let mut text = format!("{LAYERS_MAGIC}\n");
    let weights: Vec<String> = set.weights.iter().map(|w| fmt_float(*w)).collect();
    let _ = writeln!(text, "weights={}", weights.join(","));
    for (n, layer) in set.layers.iter().enumerate() {
        let name = format!("{stem}_{n:04}.hjfield");
        let mut snap = Snapshot::from_field(&layer.rho, &["rho"])?;
        let vn = velocity_names(layer.velocity.components);
        let refs: Vec<&str> = vn.iter().map(String::as_str).collect();
        snap.push_field(&layer.velocity, &refs)?;
        write_snapshot(&dir.join(&name), &snap)?;
        let _ = writeln!(text, "layer={} index={}", name, layer.index);
    }
    let path = dir.join(format!("{stem}.manifest"));
    write_text(&path, &text)?;
    Ok(path)
}

fn manifest_lines<'a>(text: &'a str, path: &Path, magic: &str) -> Result<Vec<(usize, &'a str)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, l)) if l == magic => Ok(lines.filter(|(_, l)| !l.is_empty()).collect()),
        Some((n, l)) => Err(Error::Format {
            path: path.to_path_buf(),
            line: n,
            msg: format!("expected `{magic}`, got `{l}`"),
        }),
        None => Err(Error::Format {
            path: path.to_path_buf(),
            line: 0,
            msg: "empty manifest".into(),
        }),
    }
}

pub fn read_layer_set(path: &Path) -> Result<LayerSet> {
    let text = read_text(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut weights = None;
    let mut layers = Vec::new();
    for (n, l) in manifest_lines(&text, path, LAYERS_MAGIC)? {
        if let Some(w) = l.strip_prefix("weights=") {
            let parsed: Vec<f64> = w
                .split(',')
                .map(|s| s.parse().map_err(|_| err(n, format!("cannot read weight `{s}`"))))
                .collect::<Result<_>>()?;
            weights = Some(parsed);
        } else if let Some(rest) = l.strip_prefix("layer=") {
            let (file, index) = match rest.split_once(" index=") {
                Some((f, i)) => (f, i.parse().map_err(|_| err(n, format!("cannot read layer index `{i}`")))?),
                None => (rest, layers.len()),
            };
            let snap = read_snapshot(&dir.join(file))?;
            let rho = snap.field(&["rho"])?;
            let vn = velocity_names(snap.spec.dims());
            let refs: Vec<&str> = vn.iter().map(String::as_str).collect();
            let v = snap.field(&refs)?;
            layers.push(Layer::new(index, rho, v).map_err(|e| err(n, e.to_string()))?);
        } else {
            return Err(err(n, format!("unknown manifest entry `{l}`")));
        }
    }
    let weights = weights.ok_or_else(|| err(0, "manifest has no weights line".into()))?;
    LayerSet::new(layers, weights).map_err(|e| err(0, e.to_string()))
}

const DIPOLE_FIELDS: [&str; 4] = ["S", "xi", "chi", "rho"];

/// Writes one snapshot per field of `fs` and a manifest naming them.
pub fn write_dipole_set(dir: &Path, stem: &str, fs: &DipoleFieldSet) -> Result<PathBuf> {
    let mut text = format!("{DIPOLE_MAGIC}\n");
    let _ = writeln!(text, "t={}", fmt_float(fs.t()));
    for (name, field) in DIPOLE_FIELDS.iter().zip([&fs.s, &fs.xi, &fs.chi, &fs.rho]) {
        let file = format!("{stem}_{name}.hjfield");
        write_snapshot(&dir.join(&file), &Snapshot::from_field(field, &[name])?)?;
        let _ = writeln!(text, "{name}={file}");
    }
    let path = dir.join(format!("{stem}.manifest"));
    write_text(&path, &text)?;
    Ok(path)
}

pub fn read_dipole_set(path: &Path, spin_mag: f64) -> Result<DipoleFieldSet> {
    let text = read_text(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut fields: [Option<crate::grid::GridField>; 4] = Default::default();
    for (n, l) in manifest_lines(&text, path, DIPOLE_MAGIC)? {
        let (key, value) = l.split_once('=').ok_or_else(|| err(n, format!("malformed entry `{l}`")))?;
        if key == "t" {
            continue;
        }
        let slot = DIPOLE_FIELDS
            .iter()
            .position(|f| *f == key)
            .ok_or_else(|| err(n, format!("unknown dipole field `{key}`")))?;
        fields[slot] = Some(read_snapshot(&dir.join(value))?.field(&[key])?);
    }
    let [s, xi, chi, rho] = fields;
    let missing = |name: &str| err(0, format!("manifest does not list `{name}`"));
    DipoleFieldSet::new(
        s.ok_or_else(|| missing("S"))?,
        xi.ok_or_else(|| missing("xi"))?,
        chi.ok_or_else(|| missing("chi"))?,
        rho.ok_or_else(|| missing("rho"))?,
        spin_mag,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridField, GridSpec};
    use crate::multilayer::build_oscillator_layers;

    #[test]
    fn layer_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::line(-1.0, 1.0, 41).unwrap();
        let set = build_oscillator_layers(0.5, 1.0, 1.0, &spec).unwrap();
        let path = write_layer_set(dir.path(), "layers", &set).unwrap();
        let back = read_layer_set(&path).unwrap();
        assert_eq!(back.weights, set.weights);
        for (a, b) in set.layers.iter().zip(&back.layers) {
            for node in 0..41 {
                if a.rho.is_valid(node) {
                    assert_eq!(a.rho.get(0, node).to_bits(), b.rho.get(0, node).to_bits());
                    assert_eq!(a.velocity.get(0, node).to_bits(), b.velocity.get(0, node).to_bits());
                } else {
                    assert!(!b.rho.is_valid(node));
                }
            }
        }
    }

    #[test]
    fn dipole_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::line(-1.0, 1.0, 9).unwrap();
        let f = |g: fn(f64) -> f64| GridField::scalar_from_fn(&spec, 0.25, |x| g(x[0]));
        let fs = DipoleFieldSet::new(f(|x| x * x), f(|x| 0.4 * x), f(|x| 3.0 * x + 0.1), f(|_| 1.0), 0.5).unwrap();
        let path = write_dipole_set(dir.path(), "dipole", &fs).unwrap();
        assert_eq!(read_dipole_set(&path, 0.5).unwrap(), fs);
    }
}
