//! `hjtraj` trajectory files: `# hjtraj v1`, a `# columns=` line, then one
//! CSV row `t, q1..qs, p1..ps` per sample.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::lagrangian::{PhaseState, Trajectory};

use super::{fmt_float, read_text, write_text};

const MAGIC: &str = "# hjtraj v1";

fn columns(dim: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=dim).map(|k| format!("q{k}")));
    cols.extend((1..=dim).map(|k| format!("p{k}")));
    cols.join(",")
}

pub fn render_trajectory(traj: &Trajectory) -> String {
    let dim = traj.samples.first().map_or(0, |s| s.q.len());
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "# model={} columns={}", traj.model.replace(' ', "_"), columns(dim));
    for st in &traj.samples {
        let row: Vec<String> = std::iter::once(st.t)
            .chain(st.q.iter().copied())
            .chain(st.p.iter().copied())
            .map(fmt_float)
            .collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory> {
    let err = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim_end() == MAGIC => {}
        Some((n, l)) => {
            let msg = match l.strip_prefix("# hjtraj ") {
                Some(v) => format!("unsupported hjtraj version `{}` (expected v1)", v.trim()),
                None => format!("not an hjtraj file: `{l}`"),
            };
            return Err(err(n, msg));
        }
        None => return Err(err(0, "empty file".into())),
    }
    let (n, l) = lines.next().ok_or_else(|| err(1, "missing columns line".into()))?;
    let mut model = String::new();
    let mut cols = None;
    for kv in l.trim_start_matches('#').split_whitespace() {
        match kv.split_once('=') {
            Some(("model", v)) => model = v.to_string(),
            Some(("columns", v)) => cols = Some(v.split(',').count()),
            _ => return Err(err(n, format!("malformed header entry `{kv}`"))),
        }
    }
    let width = cols.ok_or_else(|| err(n, "header is missing `columns=`".into()))?;
    if width % 2 == 0 {
        return Err(err(n, format!("{width} columns cannot be t plus q and p blocks")));
    }
    let dim = (width - 1) / 2;
    let mut samples = Vec::new();
    for (n, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = l
            .split(',')
            .map(|c| c.trim().parse().map_err(|_| err(n, format!("cannot read value `{}`", c.trim()))))
            .collect::<Result<_>>()?;
        if vals.len() != width {
            return Err(err(n, format!("expected {width} values, found {}", vals.len())));
        }
        samples.push(PhaseState::new(vals[0], vals[1..1 + dim].to_vec(), vals[1 + dim..].to_vec()));
    }
    Ok(Trajectory { model, samples })
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_text(path, &render_trajectory(traj))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    parse_trajectory(&read_text(path)?, path)
}

/// One file per ensemble member, `<dir>/<stem>_<index>.hjtraj`.
pub fn write_trajectories(dir: &Path, stem: &str, trajs: &[Trajectory]) -> Result<Vec<PathBuf>> {
    trajs
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let path = dir.join(format!("{stem}_{i:04}.hjtraj"));
            write_trajectory(&path, tr)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let traj = Trajectory {
            model: "harmonic".into(),
            samples: vec![
                PhaseState::new(0.0, vec![1.0, 0.1], vec![0.0, -0.3]),
                PhaseState::new(0.1, vec![0.995_004_165_278_025_7, 1.0 / 3.0], vec![-0.099_833_416_646_828_15, 1e-300]),
            ],
        };
        let text = render_trajectory(&traj);
        assert!(text.starts_with("# hjtraj v1\n# model=harmonic columns=t,q1,q2,p1,p2\n"));
        assert_eq!(parse_trajectory(&text, Path::new("x")).unwrap(), traj);
    }

    #[test]
    fn bad_rows_carry_line_numbers() {
        let text = "# hjtraj v1\n# columns=t,q1,p1\n0,1,2\n0,1\n";
        let e = parse_trajectory(text, Path::new("x")).unwrap_err();
        assert!(matches!(e, Error::Format { line: 4, .. }));
    }
}
