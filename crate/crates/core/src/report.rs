//! Tables emitted by the command-line tools: dynamics deviation per window
//! length and weather, and per-day comparison of runs against a baseline.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Mean H-step deviation, one row per weather condition and one column per
/// window length.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationTable {
    pub horizon: usize,
    pub windows: Vec<usize>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl DeviationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# horizon={}\nweather", self.horizon);
        for w in &self.windows {
            let _ = write!(s, ",W={w}");
        }
        s.push('\n');
        for (name, vals) in &self.rows {
            s.push_str(name);
            for v in vals {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let horizon = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("# horizon="))
            .and_then(|h| h.trim().parse().ok())
            .ok_or_else(|| err(1, "missing horizon line"))?;
        let (hi, header) = lines.next().ok_or_else(|| err(2, "missing header"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("weather") {
            return Err(err(hi + 1, "header must start with weather"));
        }
        let windows = cols
            .map(|c| c.strip_prefix("W=").and_then(|w| w.parse().ok()))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| err(hi + 1, "malformed window column"))?;
        let mut rows = Vec::new();
        for (i, line) in lines {
            let mut f = line.split(',');
            let name = f.next().unwrap_or_default().to_string();
            let vals = f
                .map(|v| v.parse::<f64>().ok())
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| err(i + 1, "malformed deviation value"))?;
            if vals.len() != windows.len() {
                return Err(err(i + 1, "row width does not match header"));
            }
            rows.push((name, vals));
        }
        Ok(Self { horizon, windows, rows })
    }
}

/// Per-day TVR and average power of several runs, with the power reduction
/// of each relative to the baseline run.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub names: Vec<String>,
    pub baseline: usize,
    /// `days[d][run] = (tvr, avg_power_w)`.
    pub days: Vec<Vec<(f64, f64)>>,
}

/// `(base - x) / base`.
pub fn reduction(base: f64, x: f64) -> f64 {
    (base - x) / base
}

impl Comparison {
    pub fn new(runs: Vec<(String, Vec<(f64, f64)>)>, baseline: usize) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::InvalidParameter("report needs at least one run".into()));
        }
        if baseline >= runs.len() {
            return Err(Error::InvalidParameter(format!(
                "baseline index {baseline} out of range for {} runs",
                runs.len()
            )));
        }
        let n = runs[0].1.len();
        if let Some((name, r)) = runs.iter().find(|(_, r)| r.len() != n) {
            return Err(Error::InvalidParameter(format!(
                "run {name} covers {} days, {} covers {n}",
                r.len(),
                runs[0].0
            )));
        }
        let days = (0..n).map(|d| runs.iter().map(|(_, r)| r[d]).collect()).collect();
        Ok(Self {
            names: runs.into_iter().map(|(n, _)| n).collect(),
            baseline,
            days,
        })
    }

    /// Reduction of total energy over all days, per run.
    pub fn total_reduction(&self) -> Vec<f64> {
        let totals: Vec<f64> = (0..self.names.len())
            .map(|r| self.days.iter().map(|d| d[r].1).sum())
            .collect();
        totals.iter().map(|&x| reduction(totals[self.baseline], x)).collect()
    }

    pub fn mean_tvr(&self) -> Vec<f64> {
        (0..self.names.len())
            .map(|r| self.days.iter().map(|d| d[r].0).sum::<f64>() / self.days.len().max(1) as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("day");
        for n in &self.names {
            let _ = write!(s, ",tvr_{n},power_{n},reduction_{n}");
        }
        s.push('\n');
        for (d, day) in self.days.iter().enumerate() {
            let _ = write!(s, "{}", d + 1);
            let base = day[self.baseline].1;
            for &(t, p) in day {
                let _ = write!(s, ",{t},{p},{}", reduction(base, p));
            }
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let (tvr, red) = (self.mean_tvr(), self.total_reduction());
        let _ = writeln!(s, "{:<24} {:>10} {:>12}", "run", "mean TVR", "reduction");
        for (i, n) in self.names.iter().enumerate() {
            let _ = writeln!(s, "{:<24} {:>10.4} {:>11.2}%", n, tvr[i], 100.0 * red[i]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deviation_table_reparses() {
        let t = DeviationTable {
            horizon: 96,
            windows: vec![5, 10, 15, 20],
            rows: (0..4)
                .map(|i| (format!("w{i}"), vec![0.1 / 3.0, 0.2, 1e-7 * i as f64, f64::MIN_POSITIVE]))
                .collect(),
        };
        assert_eq!(t.rows.len() * t.windows.len(), 16);
        assert_eq!(DeviationTable::parse(&t.to_csv(), Path::new("t.csv")).unwrap(), t);
    }

    #[test]
    fn self_comparison_is_zero_reduction() {
        let r = vec![(0.1, 5e4), (0.0, 4e4)];
        let c = Comparison::new(vec![("a".into(), r.clone()), ("b".into(), r)], 0).unwrap();
        assert_eq!(c.total_reduction(), vec![0.0, 0.0]);
        assert_eq!(c.days.len(), 2);
        assert!(c.days.iter().all(|d| d[0] == d[1]));
    }

    #[test]
    fn reduction_hand_case() {
        // base 100, 200 W; run 80, 150 W -> per-day 20 %, 25 %, total 70/300
        let c = Comparison::new(
            vec![
                ("base".into(), vec![(0.0, 100.0), (0.0, 200.0)]),
                ("x".into(), vec![(0.0, 80.0), (0.0, 150.0)]),
            ],
            0,
        )
        .unwrap();
        assert_eq!(reduction(100.0, 80.0), 0.2);
        assert_eq!(reduction(200.0, 150.0), 0.25);
        assert!((c.total_reduction()[1] - 70.0 / 300.0).abs() < 1e-15);
        assert!(c.to_csv().lines().nth(1).unwrap().ends_with(",0.2"));
    }

    #[test]
    fn mismatched_days_are_rejected() {
        let err = Comparison::new(
            vec![("a".into(), vec![(0.0, 1.0)]), ("b".into(), vec![(0.0, 1.0), (0.0, 1.0)])],
            0,
        );
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }
}
