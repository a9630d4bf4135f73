//! Summaries of CSV files written by the benchmarks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::bench::{BenchError, DistributionRow, Mode, Scenario, SweepRow};

/// Mean, sample standard deviation and count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Stats {
        let n = xs.len();
        if n == 0 {
            return Stats { mean: 0.0, stddev: 0.0, count: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stddev = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stats { mean, stddev, count: n }
    }
}

/// Distribution time per scenario and uplink bandwidth, both modes side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub scenario: Scenario,
    pub bandwidth_mbps: f64,
    pub edgepier: Option<Stats>,
    pub baseline: Option<Stats>,
}

impl Comparison {
    /// Fractional reduction of EdgePier's mean relative to the baseline.
    pub fn reduction(&self) -> Option<f64> {
        match (self.edgepier, self.baseline) {
            (Some(e), Some(b)) if b.mean > 0.0 => Some(1.0 - e.mean / b.mean),
            _ => None,
        }
    }
}

/// Least-squares line through `(x, y)` points: slope, intercept and R².
pub fn linear_fit(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, intercept, r2))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub comparisons: Vec<Comparison>,
    /// Per mode: (image MB, mean average pull ms) sorted by size.
    pub sweep: BTreeMap<Mode, Vec<(u64, f64)>>,
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Reads `distribution_time.csv` and `size_sweep.csv` from `dir`, whichever exist.
pub fn load(dir: &Path) -> Result<Report, BenchError> {
    let dist = dir.join("distribution_time.csv");
    let sweep = dir.join("size_sweep.csv");
    if !dist.exists() && !sweep.exists() {
        return Err(BenchError::Spec(format!("no benchmark CSVs in {}", dir.display())));
    }
    let mut report = Report::default();
    if dist.exists() {
        let rows: Vec<DistributionRow> = read_rows(&dist)?;
        let mut groups: BTreeMap<(Scenario, u64, Mode), Vec<f64>> = BTreeMap::new();
        for r in rows {
            groups
                .entry((r.scenario, r.bandwidth_mbps.to_bits(), r.mode))
                .or_default()
                .push(r.distribution_ms);
        }
        let mut keys: Vec<(Scenario, u64)> = groups.keys().map(|(s, b, _)| (*s, *b)).collect();
        keys.dedup();
        keys.sort_by(|a, b| a.0.cmp(&b.0).then(f64::from_bits(a.1).total_cmp(&f64::from_bits(b.1))));
        for (s, b) in keys {
            let get = |m| groups.get(&(s, b, m)).map(|v| Stats::of(v));
            report.comparisons.push(Comparison {
                scenario: s,
                bandwidth_mbps: f64::from_bits(b),
                edgepier: get(Mode::EdgePier),
                baseline: get(Mode::Baseline),
            });
        }
    }
    if sweep.exists() {
        let rows: Vec<SweepRow> = read_rows(&sweep)?;
        let mut groups: BTreeMap<(Mode, u64), Vec<f64>> = BTreeMap::new();
        for r in rows {
            groups.entry((r.mode, r.image_mb)).or_default().push(r.avg_pull_ms);
        }
        for ((m, mb), v) in groups {
            report.sweep.entry(m).or_default().push((mb, Stats::of(&v).mean));
        }
    }
    Ok(report)
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.comparisons.is_empty() {
            let _ = writeln!(
                out,
                "{:<12} {:>9} {:>22} {:>22} {:>10}",
                "scenario", "uplink", "edgepier ms", "baseline ms", "reduction"
            );
            let cell = |s: Option<Stats>| match s {
                Some(s) => format!("{:.0} ± {:.0} (n={})", s.mean, s.stddev, s.count),
                None => "-".into(),
            };
            for c in &self.comparisons {
                let red = c.reduction().map(|r| format!("{:.1}%", r * 100.0)).unwrap_or("-".into());
                let _ = writeln!(
                    out,
                    "{:<12} {:>9} {:>22} {:>22} {:>10}",
                    c.scenario.to_string(),
                    format!("{} Mbps", c.bandwidth_mbps),
                    cell(c.edgepier),
                    cell(c.baseline),
                    red
                );
            }
        }
        for (mode, pts) in &self.sweep {
            let xy: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (*x as f64, *y)).collect();
            let _ = write!(out, "size sweep {mode}:");
            for (mb, ms) in pts {
                let _ = write!(out, " {mb}MB={ms:.0}ms");
            }
            if let Some((slope, _, r2)) = linear_fit(&xy) {
                let _ = write!(out, "  slope {slope:.1} ms/MB, R² {r2:.4}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_use_sample_deviation() {
        let s = Stats::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.mean, 5.0);
        assert!((s.stddev - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(Stats::of(&[3.0]).stddev, 0.0);
    }

    #[test]
    fn exact_line_fits_perfectly() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 * i as f64 + 1.0)).collect();
        let (m, b, r2) = linear_fit(&pts).unwrap();
        assert!((m - 3.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let d = tempfile::tempdir().unwrap();
        assert!(load(d.path()).is_err());
    }
}
