//! Relative errors, per-run reports and the plain-text artifacts (CSV, PGM, JSON).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{norm_l2, rescale, GridFunction};

/// ‖u_est − u_truth‖/‖u_truth‖ in L², with u_est interpolated onto the truth's grid.
pub fn relative_error(u_est: &GridFunction, u_truth: &GridFunction) -> Result<f64> {
    let nt = norm_l2(u_truth);
    if !(nt > 0.0) {
        return Err(Error::Domain("relative error against a zero truth".into()));
    }
    let e = rescale(u_est, &u_truth.grid).sub(u_truth)?;
    Ok(norm_l2(&e) / nt)
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// FNV-1a over the canonical JSON text of a config.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let s = serde_json::to_string(cfg)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item: usize,
    pub relerr: Option<f64>,
    pub seconds: f64,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub grid: usize,
    pub config_hash: String,
    pub items: Vec<ItemResult>,
    pub mean_relerr: f64,
    pub median_relerr: f64,
    pub median_seconds: f64,
}

impl RunReport {
    pub fn new(method: &str, grid: usize, config_hash: String, items: Vec<ItemResult>) -> Self {
        let errs: Vec<f64> = items.iter().filter_map(|i| i.relerr).collect();
        let secs: Vec<f64> = items.iter().filter(|i| i.relerr.is_some()).map(|i| i.seconds).collect();
        RunReport {
            method: method.into(),
            grid,
            config_hash,
            mean_relerr: mean(&errs),
            median_relerr: median(&errs),
            median_seconds: median(&secs),
            items,
        }
    }

    pub fn failures(&self) -> usize {
        self.items.iter().filter(|i| i.relerr.is_none()).count()
    }

    pub const CSV_HEADER: &'static str = "method,grid,item,relerr,seconds";

    /// Rows without the header; timing columns are excluded when `timing` is false
    /// so that deterministic reruns diff clean.
    pub fn csv_rows(&self, timing: bool) -> String {
        let mut s = String::new();
        for it in &self.items {
            let e = it.relerr.map_or("nan".to_string(), |v| format!("{v:.12e}"));
            let t = if timing { format!("{:.6}", it.seconds) } else { String::new() };
            let _ = writeln!(s, "{},{},{},{},{}", self.method, self.grid, it.item, e, t);
        }
        s
    }

    pub fn to_csv(&self, timing: bool) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows(timing))
    }
}

/// A table with row labels and numeric columns, written as CSV.
pub fn table_csv(corner: &str, cols: &[String], rows: &[(String, Vec<f64>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{},{}", corner, cols.join(","));
    for (label, vals) in rows {
        let v: Vec<String> = vals.iter().map(|x| format!("{x:.6e}")).collect();
        let _ = writeln!(s, "{},{}", label, v.join(","));
    }
    s
}

/// 8-bit binary PGM, min→0 and max→255, y up (row 0 is the top edge y = 1).
pub fn pgm_bytes(f: &GridFunction) -> Vec<u8> {
    let g = f.grid;
    let (lo, hi) = f.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", g.nx, g.ny).into_bytes();
    for j in (0..g.ny).rev() {
        for i in 0..g.nx {
            out.push((((f.at(i, j) - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn write_pgm(path: &Path, f: &GridFunction) -> Result<()> {
    fs::write(path, pgm_bytes(f))?;
    Ok(())
}

/// Grid values as a CSV matrix (rows = y from top, columns = x).
pub fn field_csv(f: &GridFunction) -> String {
    let g = f.grid;
    let mut s = String::new();
    for j in (0..g.ny).rev() {
        let row: Vec<String> = (0..g.nx).map(|i| format!("{:.9e}", f.at(i, j))).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Grid;

    #[test]
    fn relative_error_examples() {
        let g = Grid::unit(17);
        let u = GridFunction::from_fn(g, |x, y| 1.0 + x * y);
        assert_eq!(relative_error(&u, &u).unwrap(), 0.0);
        assert!((relative_error(&GridFunction::zeros(g), &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((relative_error(&u.scaled(1.1), &u).unwrap() - 0.1).abs() < 1e-12);
        let a = relative_error(&u.map(|v| v + 0.1), &u).unwrap();
        let b = relative_error(&u.map(|v| v + 0.1).scaled(3.0), &u.scaled(3.0)).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(matches!(relative_error(&u, &GridFunction::zeros(g)), Err(Error::Domain(_))));
        // estimate on another grid is interpolated first
        let fine = Grid::unit(33);
        let lin = |x: f64, y: f64| 1.0 + x + 2.0 * y;
        assert!(relative_error(&GridFunction::from_fn(g, lin), &GridFunction::from_fn(fine, lin)).unwrap() < 1e-14);
    }

    #[test]
    fn report_aggregates_and_csv() {
        let items = vec![
            ItemResult { item: 0, relerr: Some(0.1), seconds: 1.0, error: None },
            ItemResult { item: 1, relerr: Some(0.3), seconds: 3.0, error: None },
            ItemResult { item: 2, relerr: None, seconds: 0.0, error: Some("x".into()) },
        ];
        let r = RunReport::new("tsvd", 33, "h".into(), items);
        assert!((r.mean_relerr - 0.2).abs() < 1e-15);
        assert!((r.median_relerr - 0.2).abs() < 1e-15);
        assert_eq!(r.failures(), 1);
        let csv = r.to_csv(false);
        assert!(csv.starts_with("method,grid,item,relerr,seconds\ntsvd,33,0,"));
        assert_eq!(csv.lines().count(), 4);
        let empty = RunReport::new("tsvd", 33, "h".into(), vec![]);
        assert!(empty.median_relerr.is_nan() && empty.items.is_empty());
    }

    #[test]
    fn pgm_header_and_range() {
        let g = Grid::unit(5);
        let b = pgm_bytes(&GridFunction::from_fn(g, |x, _| x));
        assert!(b.starts_with(b"P5\n5 5\n255\n"));
        let px = &b[b.len() - 25..];
        assert_eq!(px[0], 0);
        assert_eq!(px[4], 255);
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&serde_json::json!({"a": 1})).unwrap();
        assert_eq!(a, config_hash(&serde_json::json!({"a": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"a": 2})).unwrap());
    }
}
