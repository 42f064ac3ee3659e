//! Desk-scale rate studies with log-log fits, pass/fail checks and
//! persistence as a CSV of per-point statistics plus a JSON manifest.

mod fit;
mod studies;
mod two_scale;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::homogenize::mean_and_stderr;

pub use fit::{fit_linear, fit_loglog, mu_star, ScalingFit};
pub use studies::{
    run_derivative_representation, run_growth_d1, run_scaling_in_t, run_sensitivity, run_t_convergence, run_taylor,
    run_variance_decay,
};
pub use two_scale::{run_two_scale, HermiteTable, TabulatedLaw};

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "series,x,mean,stderr,samples";

/// Ensemble statistics of one series at one abscissa.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointStat {
    pub series: String,
    pub x: f64,
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl PointStat {
    pub fn from_samples(series: &str, x: f64, values: &[f64]) -> Self {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        let (m, s) = mean_and_stderr(&rows);
        Self { series: series.to_string(), x, mean: m.first().copied().unwrap_or(f64::NAN), stderr: s.first().copied().unwrap_or(f64::NAN), samples: values.len() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitEntry {
    pub series: String,
    /// What the series was fitted against, e.g. `T` or `R`.
    pub against: String,
    pub fit: ScalingFit,
}

/// A named gate; non-blocking checks are reported but never fail a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub passed: bool,
    pub blocking: bool,
}

impl Check {
    pub fn within(name: impl Into<String>, value: f64, lower: Option<f64>, upper: Option<f64>, blocking: bool) -> Self {
        let passed = value.is_finite() && lower.is_none_or(|l| value >= l) && upper.is_none_or(|u| value <= u);
        Self { name: name.into(), value, lower, upper, passed, blocking }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: u32,
    pub experiment: String,
    /// Full configuration; re-running it reproduces every point.
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    /// Stored in the CSV, not in the manifest.
    #[serde(skip)]
    pub points: Vec<PointStat>,
    pub fits: Vec<FitEntry>,
    pub checks: Vec<Check>,
    pub failed_samples: usize,
    pub wall_time_s: f64,
    pub version: String,
    /// Experiment-specific extras.
    #[serde(default)]
    pub notes: serde_json::Value,
}

impl RunRecord {
    pub fn new(experiment: &str, cfg: &RunConfig) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            experiment: experiment.to_string(),
            config: cfg.to_value(),
            master_seed: cfg.master_seed,
            seeds: Vec::new(),
            points: Vec::new(),
            fits: Vec::new(),
            checks: Vec::new(),
            failed_samples: 0,
            wall_time_s: 0.0,
            version: env!("CARGO_PKG_VERSION").to_string(),
            notes: serde_json::Value::Null,
        }
    }

    pub fn series(&self, name: &str) -> Vec<&PointStat> {
        self.points.iter().filter(|p| p.series == name).collect()
    }

    /// Log-log fit of a series against its abscissae, skipping non-positive points.
    pub fn fit_series(&mut self, name: &str, against: &str) -> Result<ScalingFit> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self.series(name).iter().filter(|p| p.x > 0.0 && p.mean > 0.0).map(|p| (p.x, p.mean)).unzip();
        let fit = fit_loglog(&xs, &ys)?;
        self.fits.push(FitEntry { series: name.to_string(), against: against.to_string(), fit: fit.clone() });
        Ok(fit)
    }

    pub fn check(&mut self, c: Check) {
        self.checks.push(c);
    }

    /// True when every blocking check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.blocking)
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.blocking && !c.passed).collect()
    }

    pub(crate) fn finish(mut self, started: Instant) -> Self {
        self.wall_time_s = started.elapsed().as_secs_f64();
        self
    }
}

/// Writes `record.csv` and `manifest.json` into `dir`, replacing old files.
pub fn write_record(record: &RunRecord, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut csv = Vec::new();
    writeln!(csv, "{CSV_HEADER}")?;
    for p in &record.points {
        if p.series.contains(',') {
            return Err(Error::Format(format!("series name {:?} contains a comma", p.series)));
        }
        writeln!(csv, "{},{:e},{:e},{:e},{}", p.series, p.x, p.mean, p.stderr, p.samples)?;
    }
    fs::write(dir.join("record.csv"), csv)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(record)?)?;
    Ok(())
}

pub fn read_record(dir: impl AsRef<Path>) -> Result<RunRecord> {
    let dir = dir.as_ref();
    let mut record: RunRecord = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if record.schema != SCHEMA_VERSION {
        return Err(Error::Format(format!("unsupported record schema {}", record.schema)));
    }
    let text = fs::read_to_string(dir.join("record.csv"))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("unexpected record.csv header".into()));
    }
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!("bad record.csv row {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
        record.points.push(PointStat {
            series: cols[0].to_string(),
            x: num(cols[1])?,
            mean: num(cols[2])?,
            stderr: num(cols[3])?,
            samples: cols[4].parse().map_err(|e| Error::Format(format!("{:?}: {e}", cols[4])))?,
        });
    }
    Ok(record)
}

/// Re-runs the experiment named in a manifest from its embedded configuration.
pub fn rerun(record: &RunRecord) -> Result<RunRecord> {
    let cfg = RunConfig::from_value(record.config.clone())?;
    run_named(&record.experiment, &cfg)
}

/// Dispatches an experiment by its identifier.
pub fn run_named(experiment: &str, cfg: &RunConfig) -> Result<RunRecord> {
    match experiment {
        "scaling-T" => run_scaling_in_t(cfg),
        "t-convergence" => run_t_convergence(cfg),
        "growth-d1" => run_growth_d1(cfg),
        "variance-decay" => run_variance_decay(cfg),
        "two-scale" => run_two_scale(cfg),
        "taylor" => run_taylor(cfg),
        "derivative" => run_derivative_representation(cfg),
        "sensitivity-check" => run_sensitivity(cfg),
        other => Err(Error::InvalidParameter(format!("unknown experiment {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig::from_value(serde_json::json!({
            "model": {"name": "linear", "lambda": 1.0, "Lambda": 2.0},
            "field": {"n_components": 1, "alpha": 1.0, "amplitude": 1.0, "corr_length": 1.0},
            "grid": {"d": 1, "n_points": 16, "box_side": 8.0}
        }))
        .unwrap()
    }

    #[test]
    fn record_roundtrip_and_csv_layout() {
        let mut r = RunRecord::new("scaling-T", &cfg());
        r.points.push(PointStat::from_samples("phi", 2.0, &[1.0, 2.0, 3.0]));
        r.points.push(PointStat { series: "phi".into(), x: 4.0, mean: 0.1 + 0.2, stderr: 1e-300, samples: 3 });
        r.points.push(PointStat { series: "phi".into(), x: 8.0, mean: std::f64::consts::PI, stderr: 0.0, samples: 3 });
        r.fit_series("phi", "T").unwrap();
        r.check(Check::within("slope", 0.5, Some(0.4), Some(0.6), true));
        let dir = tempfile::tempdir().unwrap();
        write_record(&r, dir.path()).unwrap();
        write_record(&r, dir.path()).unwrap();
        let back = read_record(dir.path()).unwrap();
        assert_eq!(back, r);
        let csv = std::fs::read_to_string(dir.path().join("record.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn point_statistics() {
        let p = PointStat::from_samples("s", 1.0, &[1.0, 3.0]);
        assert_eq!(p.mean, 2.0);
        assert!((p.stderr - 1.0).abs() < 1e-15);
    }

    #[test]
    fn checks_and_gates() {
        let mut r = RunRecord::new("x", &cfg());
        r.check(Check::within("a", 1.0, Some(0.0), None, true));
        r.check(Check::within("b", 5.0, None, Some(1.0), false));
        assert!(r.passed());
        r.check(Check::within("c", f64::NAN, None, None, true));
        assert!(!r.passed());
        assert_eq!(r.failed_checks()[0].name, "c");
    }

    #[test]
    fn unknown_experiment_is_rejected() {
        assert!(run_named("nope", &cfg()).is_err());
    }
}
