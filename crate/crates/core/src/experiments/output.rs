//! Tables, artifacts and the deterministic parallel runner.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::csv::CsvWriter;
use crate::error::{CfmError, Result};
use crate::metrics::RateFit;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Text(String),
    Empty,
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Real)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        let mut w = CsvWriter::new(out);
        w.header(&self.header)?;
        for row in &self.rows {
            let mut b = w.row();
            for c in row {
                b = match c {
                    Cell::Int(v) => b.int(*v),
                    Cell::Real(v) => b.real(*v),
                    Cell::Text(s) => b.text(s),
                    Cell::Empty => b.opt_real(None),
                };
            }
            b.finish()?;
        }
        w.flush()
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }
}

/// Everything one experiment run writes.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub experiment: &'static str,
    pub name: String,
    pub raw: Table,
    pub summary: Table,
    pub meta: Value,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let file = path.file_name().and_then(|f| f.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{file}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

impl Artifact {
    /// Writes `<root>/<experiment>/<name>.{raw.csv,summary.csv,meta.json}`,
    /// each through a temporary file and a rename.
    pub fn write(&self, root: &Path) -> Result<Vec<PathBuf>> {
        let dir = root.join(self.experiment);
        let io_err = |e: io::Error, p: &Path| CfmError::InvalidArgument(format!("cannot write {}: {e}", p.display()));
        fs::create_dir_all(&dir).map_err(|e| io_err(e, &dir))?;
        let mut meta = serde_json::to_vec_pretty(&self.meta).expect("json");
        meta.push(b'\n');
        let files = [
            (format!("{}.raw.csv", self.name), self.raw.to_csv_bytes()),
            (format!("{}.summary.csv", self.name), self.summary.to_csv_bytes()),
            (format!("{}.meta.json", self.name), meta),
        ];
        let mut paths = Vec::new();
        for (file, bytes) in files {
            let p = dir.join(file);
            write_atomic(&p, &bytes).map_err(|e| io_err(e, &p))?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// Common meta document; `extra` is merged in at the top level.
pub fn meta_document<C: serde::Serialize>(experiment: &str, name: &str, config: &C, seeds: Value, extra: Value) -> Value {
    let mut doc = json!({
        "experiment": experiment,
        "name": name,
        "build": {
            "package": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
        },
        "config": serde_json::to_value(config).expect("config serializes"),
        "seeds": seeds,
    });
    if let (Value::Object(d), Value::Object(e)) = (&mut doc, extra) {
        d.extend(e);
    }
    doc
}

/// Work is split into indexed tasks whose results are gathered in index
/// order, so outputs do not depend on the thread count.
pub struct Runner {
    pool: rayon::ThreadPool,
}

impl Runner {
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| CfmError::InvalidArgument(format!("thread pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// First error in index order wins.
    pub fn map<T, F>(&self, count: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        let out: Vec<Result<T>> = self.pool.install(|| (0..count).into_par_iter().map(&f).collect());
        out.into_iter().collect()
    }
}

/// Mean, standard error and order statistics of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub std_error: f64,
    pub q50: f64,
    pub q90: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "stats of an empty sample");
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let std_error = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            count: values.len(),
            mean,
            std_error,
            q50: quantile(&sorted, 0.5),
            q90: quantile(&sorted, 0.9),
            max: sorted[sorted.len() - 1],
        }
    }
}

pub const RATE_SUMMARY_HEADER: [&str; 14] = [
    "kind",
    "metric",
    "n",
    "count",
    "mean",
    "std_error",
    "q50",
    "q90",
    "max",
    "slope",
    "intercept",
    "r_squared",
    "slope_std_error",
    "ref_bias",
];

pub fn rate_summary_table() -> Table {
    Table::new(&RATE_SUMMARY_HEADER)
}

pub fn push_stats_row(t: &mut Table, metric: &str, n: usize, s: &Stats) {
    t.push(vec![
        "stats".into(),
        metric.into(),
        n.into(),
        s.count.into(),
        s.mean.into(),
        s.std_error.into(),
        s.q50.into(),
        s.q90.into(),
        s.max.into(),
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
    ]);
}

/// `ref_bias` is the fitted value at `n_ref`, the part of the curve that the
/// finite reference cannot resolve.
pub fn push_fit_row(t: &mut Table, metric: &str, fit: &RateFit, n_ref: usize) {
    let ref_bias = (fit.intercept + fit.slope * (n_ref as f64).ln()).exp();
    t.push(vec![
        "fit".into(),
        metric.into(),
        Cell::Empty,
        fit.points.len().into(),
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
        fit.slope.into(),
        fit.intercept.into(),
        fit.r_squared.into(),
        fit.slope_std_error.into(),
        ref_bias.into(),
    ]);
}

/// Per-n stats rows for `metric` followed by a fit of the per-n means. The
/// fit row is left out when some mean is not positive (exact coupling).
pub fn push_rate_block(t: &mut Table, metric: &str, samples: &[(usize, f64)], n_ref: usize) -> (Option<RateFit>, Vec<(usize, Stats)>) {
    let mut ns: Vec<usize> = samples.iter().map(|s| s.0).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut per_n = Vec::new();
    for &n in &ns {
        let vals: Vec<f64> = samples.iter().filter(|s| s.0 == n).map(|s| s.1).collect();
        let s = Stats::of(&vals);
        push_stats_row(t, metric, n, &s);
        per_n.push((n, s));
    }
    let pts: Vec<(usize, f64)> = per_n.iter().map(|(n, s)| (*n, s.mean)).collect();
    let fit = crate::metrics::fit_rate(&pts).ok();
    if let Some(f) = &fit {
        push_fit_row(t, metric, f, n_ref);
    }
    (fit, per_n)
}

/// Per-n stats of one column, straight from a raw table.
pub fn stats_from_raw(raw: &Table, column: &str) -> Vec<(usize, Stats)> {
    let (Some(nc), Some(vc)) = (raw.column("n"), raw.column(column)) else {
        return Vec::new();
    };
    let mut ns: Vec<usize> = raw
        .rows
        .iter()
        .filter_map(|r| match r[nc] {
            Cell::Int(n) => Some(n as usize),
            _ => None,
        })
        .collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let vals: Vec<f64> = raw
                .rows
                .iter()
                .filter(|r| r[nc] == Cell::Int(n as i64))
                .filter_map(|r| match r[vc] {
                    Cell::Real(v) => Some(v),
                    _ => None,
                })
                .collect();
            (n, Stats::of(&vals))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let s = Stats::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(s.q50, 3.0);
        assert!((s.q90 - 4.6).abs() < 1e-15);
        assert_eq!(s.max, 5.0);
        assert_eq!(s.mean, 3.0);
    }

    #[test]
    fn runner_keeps_order_and_first_error() {
        let r = Runner::new(4).unwrap();
        let v = r.map(100, |i| Ok(i * i)).unwrap();
        assert_eq!(v[7], 49);
        let e = r
            .map(100, |i| if i % 10 == 3 { Err(CfmError::InvalidArgument(format!("{i}"))) } else { Ok(i) })
            .unwrap_err();
        assert_eq!(e, CfmError::InvalidArgument("3".into()));
    }
}
