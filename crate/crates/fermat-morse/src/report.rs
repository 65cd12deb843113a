//! Machine-readable outputs: JSON-lines reports, CSV trajectory dumps and
//! two-column plot-data series. Schemas are versioned through the `schema`
//! field of the header record; see docs/report-schemas.md.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geodesic::Geodesic;
use crate::randers::RandersPoint;

pub const SCHEMA_VERSION: u32 = 1;

/// Header record: first line of every report file.
#[derive(Serialize)]
pub struct Header<'a> {
    pub schema: u32,
    pub command: &'a str,
    pub scenario: &'a str,
    pub seed: u64,
}

/// Collects report records and writes them as one JSON object per line.
/// Writing is serialized through this single owner, so parallel work only
/// produces values, never interleaved output.
pub struct ReportWriter {
    out_dir: PathBuf,
    lines: Vec<String>,
    name: String,
}

impl ReportWriter {
    pub fn new(out_dir: &Path, command: &str, scenario: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        let mut w = ReportWriter {
            out_dir: out_dir.to_path_buf(),
            lines: Vec::new(),
            name: format!("{command}.jsonl"),
        };
        w.record(&Header { schema: SCHEMA_VERSION, command, scenario, seed })?;
        Ok(w)
    }

    pub fn record<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value)
            .map_err(|e| Error::Numerical(format!("report serialization: {e}")))?;
        self.lines.push(line);
        Ok(())
    }

    pub fn record_value(&mut self, value: Value) -> Result<()> {
        self.record(&value)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let path = self.out_dir.join(&self.name);
        let mut f = fs::File::create(&path)?;
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        Ok(path)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }
}

/// CSV trajectory dump: s, chart_id, coords..., velocity..., alpha_speed,
/// F_speed at uniformly spaced parameters.
pub fn trajectory_csv(geod: &Geodesic, n_samples: usize) -> Result<String> {
    let n = geod.scenario.dim();
    let mut out = String::from("s,chart_id");
    for i in 0..n {
        out.push_str(&format!(",x{i}"));
    }
    for i in 0..n {
        out.push_str(&format!(",v{i}"));
    }
    out.push_str(",alpha_speed,F_speed\n");
    for k in 0..=n_samples {
        let s = k as f64 / n_samples as f64;
        let (chart, x, v) = geod.state(s);
        let p = RandersPoint::at(&geod.scenario, &x)?;
        let a_speed = v.dot(&(&p.alpha * &v)).sqrt();
        let f_speed = p.f(&v);
        out.push_str(&format!("{s:.6}"));
        out.push_str(&format!(",{chart}"));
        for i in 0..n {
            out.push_str(&format!(",{:.12e}", x[i]));
        }
        for i in 0..n {
            out.push_str(&format!(",{:.12e}", v[i]));
        }
        out.push_str(&format!(",{a_speed:.12e},{f_speed:.12e}\n"));
    }
    Ok(out)
}

pub fn write_trajectory(
    out_dir: &Path,
    stem: &str,
    geod: &Geodesic,
    n_samples: usize,
) -> Result<PathBuf> {
    let path = out_dir.join(format!("{stem}.csv"));
    fs::write(&path, trajectory_csv(geod, n_samples)?)?;
    Ok(path)
}

/// Two-column plot-data series (whitespace separated, one pair per line).
pub fn write_plot_series(
    out_dir: &Path,
    stem: &str,
    series: &[(f64, f64)],
) -> Result<PathBuf> {
    let path = out_dir.join(format!("{stem}.dat"));
    let mut body = String::new();
    for (a, b) in series {
        body.push_str(&format!("{a:.12e} {b:.12e}\n"));
    }
    fs::write(&path, body)?;
    Ok(path)
}

/// Chart-trace of a geodesic as a plottable (x0, x1) series; falls back to
/// (s, x0) in dimension one.
pub fn trace_series(geod: &Geodesic, n_samples: usize) -> Vec<(f64, f64)> {
    let n = geod.scenario.dim();
    (0..=n_samples)
        .map(|k| {
            let s = k as f64 / n_samples as f64;
            let (_, x, _) = geod.state(s);
            if n >= 2 {
                (x[0], x[1])
            } else {
                (s, x[0])
            }
        })
        .collect()
}
